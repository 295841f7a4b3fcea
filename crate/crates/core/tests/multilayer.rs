mod common;

use common::*;
use layered_ggm::multilayer::*;
use layered_ggm::numkit::*;
use layered_ggm::screening::SupportSet;
use layered_ggm::simgen::*;
use layered_ggm::solvers::{glasso, GlassoProblem};
use layered_ggm::tuning::*;
use layered_ggm::twolayer::*;

fn three_layer(seed: u64) -> (GroundTruth<f64>, LayeredDataset<f64>) {
    let truth = build_truth(&ModelRecipe::three_layer(8, 6, 5, 80, 1.5), RngSeed(seed)).unwrap();
    let d = gen_dataset(&truth, 80, RngSeed(seed).derive(1)).unwrap();
    (truth, d)
}

fn small_cfg() -> TwoLayerConfig<f64> {
    let mut cfg = TwoLayerConfig::new(PenaltyConfig::new(0.1, 0.1));
    cfg.stability.n_boot = 4;
    cfg
}

#[test]
fn decomposition_stacks_earlier_layers() {
    let (_, d) = three_layer(1);
    let stages = decompose(&d).unwrap();
    assert_eq!(stages.iter().map(|s| s.target).collect::<Vec<_>>(), vec![2, 1, 0]);
    let top = stages[0].design.as_ref().unwrap();
    assert_eq!(top.shape(), (80, 14));
    assert_eq!(stages[0].source_dims, vec![8, 6]);
    assert_eq!(top.block(0, 8, 80, 6), d.layers[1]);
    assert_eq!(stages[1].design.as_ref().unwrap(), &d.layers[0]);
    assert!(stages[2].design.is_none());
    let one = LayeredDataset { layers: vec![d.layers[0].clone()], ..d };
    assert!(decompose(&one).is_err());
}

#[test]
fn split_blocks_inverts_stacking() {
    let b = uniform_matrix(14, 5, -1.0, 1.0, 3);
    let blocks = split_blocks(&b, &[8, 6], 2).unwrap();
    assert_eq!(blocks.len(), 2);
    let back = DenseMatrix::vstack(&[&blocks[&(0, 2)], &blocks[&(1, 2)]]).unwrap();
    assert_eq!(back, b);
    assert!(split_blocks(&b, &[8, 5], 2).is_err());
}

#[test]
fn stages_are_fitted_independently() {
    let (_, d) = three_layer(2);
    let cfg = small_cfg();
    let est = fit_multilayer(&d, &cfg, None, Some(0.1)).unwrap();
    let stages = decompose(&d).unwrap();
    for stage in stages.iter().filter(|s| s.design.is_some()) {
        let mut c = cfg.clone();
        c.stability.seed = cfg.stability.seed.derive(stage.target as u64);
        let alone = fit_two_layer(stage.design.as_ref().unwrap(), &stage.response, &c, None).unwrap();
        assert_eq!(alone.b_hat, est.per_stage[&stage.target].b_hat);
        assert_eq!(alone.theta_hat, est.per_stage[&stage.target].theta_hat);
    }
    assert_eq!(est.coeff_hat.len(), 3);
    assert_eq!(est.coeff_hat[&(1, 2)].shape(), (6, 5));
    assert_eq!(est.precision_hat.len(), 3);
    let direct = glasso(&GlassoProblem::new(sample_covariance(&d.layers[0]).unwrap(), 0.1).with_ridge_fallback()).unwrap();
    assert!(est.bottom_theta.as_matrix().sub(direct.theta.as_matrix()).unwrap().max_abs() < 1e-12);
}

#[test]
fn parentless_layer_reduces_to_graphical_lasso() {
    let recipe = ModelRecipe {
        coeff_prob: Some(0.0),
        ..ModelRecipe::two_layer_a(6, 7, 120)
    };
    let truth: GroundTruth<f64> = build_truth(&recipe, RngSeed(4)).unwrap();
    let d = gen_dataset(&truth, 120, RngSeed(5)).unwrap();
    let sup = SupportSet::from_p_values(DenseMatrix::from_fn(7, 6, |_, _| 1.0), 0.1);
    let out = alternate(&d.layers[0], &d.layers[1], &sup, &PenaltyConfig::new(0.1, 0.12)).unwrap();
    assert_eq!(out.b.count_nonzero(0.0), 0);
    let direct = glasso(&GlassoProblem::new(sample_covariance(&d.layers[1]).unwrap(), 0.12)).unwrap();
    assert!(out.theta.as_matrix().sub(direct.theta.as_matrix()).unwrap().max_abs() < 1e-3);
}

#[test]
fn bottom_layer_bic_picks_a_grid_value() {
    let (_, d) = three_layer(3);
    let grid = GridSpec::Default { points: 5 };
    let (theta, rho) = fit_bottom_layer(&d.layers[0], None, &grid).unwrap();
    let rhos = grid.resolve(8, 8, 80).rhos;
    assert!(rhos.contains(&rho));
    let s = sample_covariance(&d.layers[0]).unwrap();
    let chosen = bic_precision(&s, &theta, 80);
    for &r in &rhos {
        let t = glasso(&GlassoProblem::new(s.clone(), r).with_ridge_fallback()).unwrap().theta;
        assert!(bic_precision(&s, &t, 80) >= chosen - 1e-12);
    }
}

#[test]
fn estimate_files_are_written() {
    let (_, d) = three_layer(4);
    let est = fit_multilayer(&d, &small_cfg(), None, Some(0.1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_estimate(dir.path(), &est).unwrap();
    for name in ["B_1_2.csv", "B_1_3.csv", "B_2_3.csv", "Theta_1.csv", "Theta_2.csv", "Theta_3.csv", "estimate.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let b: DenseMatrix<f64> = load_matrix(&dir.path().join("B_2_3.csv")).unwrap();
    assert_eq!(b, est.coeff_hat[&(1, 2)]);
}
