mod common;

use common::*;
use layered_ggm::numkit::*;
use proptest::prelude::*;

#[test]
fn sample_covariance_by_hand() {
    let x = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 0.0]]).unwrap();
    let s = sample_covariance(&x).unwrap();
    assert_eq!(s, DenseMatrix::from_rows(&[[5.0, 1.0], [1.0, 2.0]]).unwrap());
    let c = center_columns(&x);
    assert_eq!(c, DenseMatrix::from_rows(&[[-1.0, 1.0], [1.0, -1.0]]).unwrap());
    assert!(sample_covariance(&DenseMatrix::<f64>::zeros(0, 2)).is_err());
}

#[test]
fn log_det_matches_eigen_oracle() {
    for seed in 0..30 {
        let p = 1 + (seed as usize % 9);
        let a = random_spd(p, 0.05, seed);
        let ours = log_det_spd(&a).unwrap();
        let oracle = eigen_logdet(&a);
        assert!((ours - oracle).abs() <= 1e-8 * oracle.abs().max(1.0), "p={p}: {ours} vs {oracle}");
    }
}

#[test]
fn jacobi_eigenvalues_match_oracle() {
    for seed in 0..10 {
        let a = random_spd(7, 0.0, 100 + seed).sub(&DenseMatrix::identity(7).scale(0.3)).unwrap();
        let ours = symmetric_eigenvalues(&a).unwrap();
        for (u, v) in ours.iter().zip(eigenvalues(&a)) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}

#[test]
fn not_positive_definite_is_reported() {
    let a = DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
    assert!(matches!(log_det_spd(&a), Err(layered_ggm::GgmError::NotPositiveDefinite)));
    assert!(SpdMatrix::new(a).is_err());
}

#[test]
fn cholesky_solve_and_inverse() {
    let a = random_spd(6, 0.5, 7);
    let b: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    let x1 = Cholesky::new(&a).unwrap().solve(&b);
    let x2 = solve_general(&a, &b).unwrap();
    for (u, v) in x1.iter().zip(&x2) {
        assert!((u - v).abs() < 1e-10);
    }
    let inv = SpdMatrix::new(a.clone()).unwrap().inverse();
    let oracle = inverse(&a);
    assert!(inv.as_matrix().sub(&oracle).unwrap().max_abs() < 1e-10);
}

#[test]
fn mvn_moments_at_large_n() {
    let sigma = DenseMatrix::from_rows(&[[1.0, 0.5, 0.0], [0.5, 2.0, -0.4], [0.0, -0.4, 1.5]]).unwrap();
    let x = mvn_sample(&SpdMatrix::new(sigma.clone()).unwrap(), 100_000, RngSeed(11));
    let s = sample_covariance(&center_columns(&x)).unwrap();
    assert!(s.sub(&sigma).unwrap().max_abs() < 0.03, "{s:?}");
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let sigma = SpdMatrix::new(random_spd(4, 0.2, 3)).unwrap();
    let a = mvn_sample(&sigma, 50, RngSeed(9));
    let b = mvn_sample(&sigma, 50, RngSeed(9));
    let c = mvn_sample(&sigma, 50, RngSeed(10));
    assert_eq!(a.as_slice(), b.as_slice());
    assert_ne!(a.as_slice(), c.as_slice());
    assert_ne!(RngSeed(9).derive(0), RngSeed(9).derive(1));
    assert_eq!(RngSeed(9).derive(3), RngSeed(9).derive(3));
    assert!(mvn_sample_checked(&DenseMatrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap(), 5, RngSeed(0)).is_err());
}

#[test]
fn csv_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let m = uniform_matrix(5, 3, -1e3, 1e3, 4).map(|v| v / 7.0);
    save_matrix(&m, &path).unwrap();
    let back: DenseMatrix<f64> = load_matrix(&path).unwrap();
    assert_eq!(back, m);
}

#[test]
fn csv_rejects_garbage() {
    assert!(read_matrix_csv::<f64, _>("1,2\n3\n".as_bytes()).is_err());
    assert!(read_matrix_csv::<f64, _>("1,x\n".as_bytes()).is_err());
    assert!(read_matrix_csv::<f64, _>("1,NaN\n".as_bytes()).is_err());
    assert!(matches!(
        load_matrix::<f64>(std::path::Path::new("/nonexistent/m.csv")),
        Err(layered_ggm::GgmError::Io { .. })
    ));
}

#[test]
fn single_precision_agrees() {
    let a = random_spd(5, 0.5, 21);
    let a32: DenseMatrix<f32> = a.cast();
    let l32 = log_det_spd(&a32).unwrap() as f64;
    let l64 = log_det_spd(&a).unwrap();
    assert!((l32 - l64).abs() < 1e-4 * l64.abs().max(1.0));
    let x32 = mvn_sample(&SpdMatrix::new(a32).unwrap(), 10, RngSeed(2));
    assert!(x32.is_finite());
}

fn spd_strategy() -> impl Strategy<Value = DenseMatrix<f64>> {
    (1usize..8, any::<u64>(), 0.01f64..2.0).prop_map(|(p, seed, shift)| random_spd(p, shift, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_det_of_inverse_negates(a in spd_strategy()) {
        let inv = SpdMatrix::new(a.clone()).unwrap().inverse();
        let l = log_det_spd(&a).unwrap();
        prop_assert!((inv.log_det() + l).abs() < 1e-8 * l.abs().max(1.0));
    }

    #[test]
    fn sample_covariance_is_psd(n in 1usize..20, p in 1usize..6, seed in any::<u64>()) {
        let x = uniform_matrix(n, p, -3.0, 3.0, seed);
        let s = sample_covariance(&center_columns(&x)).unwrap();
        prop_assert!(s.is_symmetric(0.0));
        prop_assert!(eigenvalues(&s)[0] >= -1e-10);
    }

    #[test]
    fn centered_columns_have_zero_mean(n in 1usize..20, p in 1usize..6, seed in any::<u64>()) {
        let c = center_columns(&uniform_matrix(n, p, -5.0, 5.0, seed));
        for j in 0..p {
            prop_assert!(c.column(j).iter().sum::<f64>().abs() < 1e-10);
        }
    }
}
