mod common;

use common::*;
use layered_ggm::numkit::*;
use layered_ggm::screening::*;
use layered_ggm::simgen::*;
use layered_ggm::tuning::*;
use layered_ggm::twolayer::*;

fn data(seed: u64) -> (DenseMatrix<f64>, DenseMatrix<f64>) {
    let truth: GroundTruth<f64> = build_truth(&ModelRecipe::two_layer_a(10, 12, 60), RngSeed(seed)).unwrap();
    let d = gen_dataset(&truth, 60, RngSeed(seed).derive(1)).unwrap();
    (d.layers[0].clone(), d.layers[1].clone())
}

fn bic_oracle(x: &DenseMatrix<f64>, y: &DenseMatrix<f64>, b: &DenseMatrix<f64>, theta: &DenseMatrix<f64>) -> f64 {
    let n = x.rows() as f64;
    let r = to_na(y) - to_na(x) * to_na(b);
    let s = r.transpose() * &r / n;
    let th = to_na(theta);
    let nnz = |m: &DenseMatrix<f64>| m.as_slice().iter().filter(|v| **v != 0.0).count() as f64;
    (s * &th).trace() - eigen_logdet(theta) + n.ln() / n * ((nnz(theta) - theta.rows() as f64) / 2.0 + nnz(b))
}

#[test]
fn bic_matches_direct_formula() {
    let (x, y) = data(1);
    let sup = screen(&x, &y, 0.1).unwrap();
    let out = alternate(&x, &y, &sup, &PenaltyConfig::new(0.1, 0.1)).unwrap();
    let ours = bic(&out.b, out.theta.as_matrix(), &x, &y).unwrap();
    let oracle = bic_oracle(&x, &y, &out.b, out.theta.as_matrix());
    assert!((ours - oracle).abs() < 1e-10 * oracle.abs());
    assert!(bic(&out.b.transpose(), out.theta.as_matrix(), &x, &y).is_err());
}

#[test]
fn grid_search_returns_the_table_minimizer() {
    let (x, y) = data(2);
    let sup = screen(&x, &y, 0.1).unwrap();
    let m = Moments::new(&x, &y).unwrap();
    let grid = TuningGrid::default_for(10, 12, 60, 4);
    let cfg = PenaltyConfig::new(0.0, 0.0);
    let out = grid_search(&m, &sup, &grid, &cfg).unwrap();
    assert_eq!(out.table.len(), 16);
    assert!(grid.lambdas.contains(&out.lambda_star) && grid.rhos.contains(&out.rho_star));
    let best = out.table.iter().map(|r| r.bic).fold(f64::INFINITY, f64::min);
    let row = out.table.iter().find(|r| r.lambda == out.lambda_star && r.rho == out.rho_star).unwrap();
    assert_eq!(row.bic, best);
    // every row reproducible from a standalone run
    for r in out.table.iter().step_by(5) {
        let mut c = cfg.clone();
        c.lambda = r.lambda;
        c.rho = r.rho;
        let alt = alternate(&x, &y, &sup, &c).unwrap();
        let v = bic_oracle(&x, &y, &alt.b, alt.theta.as_matrix());
        assert!((v - r.bic).abs() < 1e-9 * v.abs());
    }
    let mut buf = Vec::new();
    out.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 17);
}

#[test]
fn huge_lambda_is_not_selected() {
    let (x, y) = data(3);
    let sup = screen(&x, &y, 0.1).unwrap();
    let m = Moments::new(&x, &y).unwrap();
    let grid = TuningGrid::new(vec![0.05, 100.0], vec![0.1]).unwrap();
    let out = grid_search(&m, &sup, &grid, &PenaltyConfig::new(0.0, 0.0)).unwrap();
    assert_eq!(out.lambda_star, 0.05);
    assert_eq!(out.table[1].b_nnz, 0);
}

#[test]
fn ties_go_to_the_larger_penalty_pair() {
    // nothing screened in: every λ gives B = 0, so BIC ties along λ
    let (x, y) = data(4);
    let sup = SupportSet::from_p_values(DenseMatrix::from_fn(12, 10, |_, _| 1.0), 0.1);
    let m = Moments::new(&x, &y).unwrap();
    let grid = TuningGrid::new(vec![0.0, 0.1, 0.2], vec![0.15]).unwrap();
    let out = grid_search(&m, &sup, &grid, &PenaltyConfig::new(0.0, 0.0)).unwrap();
    assert!(out.table.iter().all(|r| r.bic == out.table[0].bic));
    assert_eq!((out.lambda_star, out.rho_star), (0.2, 0.15));
}

#[test]
fn grid_specs() {
    let g: TuningGrid<f64> = GridSpec::Default { points: 3 }.resolve(30, 60, 100);
    assert_eq!(g.lambdas, vec![0.0, 0.25 * (30f64.ln() / 100.0).sqrt(), 0.5 * (30f64.ln() / 100.0).sqrt()]);
    let e = TuningGrid::new(vec![0.1], vec![0.2, 0.3]).unwrap();
    assert_eq!(GridSpec::Explicit(e.clone()).resolve(1, 1, 1), e);
    assert_eq!(e.points(), vec![(0.1, 0.2), (0.1, 0.3)]);
    assert!(TuningGrid::new(vec![-0.1], vec![0.1]).is_err());
    let spec: GridSpec<f64> = serde_json::from_str(r#"{"default":{"points":4}}"#).unwrap();
    assert_eq!(spec, GridSpec::Default { points: 4 });
}
