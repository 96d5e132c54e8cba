use ffgo_core::lora::{self, GradInstance, LoraAdapter, LoraError, Matrix};
use ffgo_core::Exec;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.data().iter().map(|v| v.to_bits()).collect()
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=48, 1usize..=48).prop_flat_map(|(d, k)| (Just(d), Just(k), 1..=d.min(k)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn delta_matches_nalgebra_product((d, k, r) in dims(), alpha in -4.0f64..4.0, seed in any::<u64>()) {
        let ad = lora::random_adapter(d, k, r, alpha, seed).unwrap();
        let ours = to_na(&lora::delta(&ad, Exec::default()));
        let oracle = (to_na(ad.a()) * to_na(ad.b())) * alpha;
        let scale = oracle.amax().max(1.0);
        prop_assert!((ours - oracle).amax() <= 1e-12 * scale);
    }

    #[test]
    fn merge_unmerge_round_trip((d, k, r) in dims(), alpha in -4.0f64..4.0, seed in any::<u64>()) {
        let ad = lora::random_adapter(d, k, r, alpha, seed).unwrap();
        let w = lora::random_matrix(d, k, seed ^ 1);
        let merged = lora::merge(&w, &ad, Exec::default()).unwrap();
        let back = lora::unmerge(&merged, &ad, Exec::default()).unwrap();
        prop_assert!(back.sub(&w).unwrap().max_abs() <= 1e-9);
    }

    #[test]
    fn delta_rank_is_at_most_r((d, k, r) in dims(), seed in any::<u64>()) {
        let ad = lora::random_adapter(d, k, r, 1.0, seed).unwrap();
        let rank = lora::numerical_rank(&lora::delta(&ad, Exec::default()), 1e-8).unwrap();
        prop_assert!(rank <= r);
        // Gaussian factors are full rank with probability one.
        prop_assert_eq!(rank, r);
    }

    #[test]
    fn singular_values_match_nalgebra(rows in 1usize..24, cols in 1usize..24, seed in any::<u64>()) {
        let m = lora::random_matrix(rows, cols, seed);
        let mut ours = lora::singular_values(&m);
        let mut oracle: Vec<f64> = to_na(&m).singular_values().iter().copied().collect();
        ours.sort_by(|a, b| b.total_cmp(a));
        oracle.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(ours.len(), oracle.len());
        for (a, b) in ours.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-10 * oracle[0].max(1.0));
        }
    }

    #[test]
    fn zero_updates_are_bitwise_identity((d, k, r) in dims(), seed in any::<u64>()) {
        let w = lora::random_matrix(d, k, seed);
        let zero_alpha = lora::random_adapter(d, k, r, 0.0, seed ^ 7).unwrap();
        prop_assert_eq!(bits(&lora::merge(&w, &zero_alpha, Exec::default()).unwrap()), bits(&w));
        let fresh = lora::init_adapter(d, k, r, 3.0, seed).unwrap();
        prop_assert!(fresh.b().is_zero());
        prop_assert_eq!(bits(&lora::merge(&w, &fresh, Exec::default()).unwrap()), bits(&w));
        prop_assert_eq!(bits(&lora::unmerge(&w, &fresh, Exec::default()).unwrap()), bits(&w));
    }

    #[test]
    fn binary_and_json_round_trip((d, k, r) in (1usize..=8, 1usize..=8).prop_flat_map(|(d, k)| (Just(d), Just(k), 1..=d.min(k))), seed in any::<u64>()) {
        let ad = lora::random_adapter(d, k, r, 0.5, seed).unwrap();
        let bytes = lora::encode_adapter(&ad);
        prop_assert_eq!(bytes.len(), 32 + 8 * (d * r + r * k));
        prop_assert_eq!(lora::decode_adapter(&bytes).unwrap(), ad.clone());
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.bin", "a.json"] {
            let p = dir.path().join(name);
            lora::save_adapter(&ad, &p).unwrap();
            prop_assert_eq!(lora::load_adapter(&p).unwrap(), ad.clone());
        }
    }
}

/// Central differences of L = 0.5 ||W + alpha A B - T||^2 computed with
/// nalgebra, independent of the crate's merge and gradient code.
fn fd_oracle(ad: &LoraAdapter, w: &Matrix, t: &Matrix, h: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let (a, b, w, t) = (to_na(ad.a()), to_na(ad.b()), to_na(w), to_na(t));
    let alpha = ad.alpha();
    let loss = |a: &DMatrix<f64>, b: &DMatrix<f64>| 0.5 * (&w + (a * b) * alpha - &t).norm_squared();
    let mut da = DMatrix::zeros(a.nrows(), a.ncols());
    for i in 0..a.len() {
        let (mut p, mut m) = (a.clone(), a.clone());
        p[i] += h;
        m[i] -= h;
        da[i] = (loss(&p, &b) - loss(&m, &b)) / (2.0 * h);
    }
    let mut db = DMatrix::zeros(b.nrows(), b.ncols());
    for i in 0..b.len() {
        let (mut p, mut m) = (b.clone(), b.clone());
        p[i] += h;
        m[i] -= h;
        db[i] = (loss(&a, &p) - loss(&a, &m)) / (2.0 * h);
    }
    (da, db)
}

#[test]
fn analytic_gradients_match_independent_differences() {
    for seed in 0..20u64 {
        let g = GradInstance::draw(seed, 10);
        let ad = lora::random_adapter(g.d, g.k, g.r, g.alpha, g.seed).unwrap();
        let w = lora::random_matrix(g.d, g.k, seed + 1000);
        let t = lora::random_matrix(g.d, g.k, seed + 2000);
        let upstream = lora::merge(&w, &ad, Exec::default()).unwrap().sub(&t).unwrap();
        let (da, db) = lora::grad(&ad, &upstream, Exec::default()).unwrap();
        let (oa, ob) = fd_oracle(&ad, &w, &t, 1e-5);
        for (ours, oracle) in [(to_na(&da), oa), (to_na(&db), ob)] {
            for (x, y) in ours.iter().zip(oracle.iter()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
                assert!(rel <= 1e-5, "seed {seed}: analytic {x} vs numeric {y}");
            }
        }
    }
}

#[test]
fn gradient_check_over_hundred_instances() {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let r = GradInstance::draw(seed, 12).run(1e-5, Exec::default()).unwrap();
        assert!(r.checked > 0);
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}

#[test]
fn gradient_shapes_are_checked() {
    let ad = lora::random_adapter(4, 5, 2, 1.0, 3).unwrap();
    assert!(matches!(lora::grad(&ad, &Matrix::zeros(5, 4), Exec::default()), Err(LoraError::ShapeMismatch(_))));
    assert!(matches!(lora::init_adapter(4, 5, 6, 1.0, 0), Err(LoraError::BadRank { .. })));
    assert!(matches!(lora::init_adapter(4, 5, 0, 1.0, 0), Err(LoraError::BadRank { .. })));
}

#[test]
fn init_variance_follows_rank() {
    // A ~ N(0, 1/r): the sample variance of 64*16 entries lands near 1/16.
    let ad = lora::init_adapter(64, 64, 16, 1.0, 11).unwrap();
    let n = ad.a().data().len() as f64;
    let mean = ad.a().data().iter().sum::<f64>() / n;
    let var = ad.a().data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    assert!((var - 1.0 / 16.0).abs() < 0.015, "variance {var}");
}

#[test]
fn binary_header_layout() {
    let ad = LoraAdapter::new(
        Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(),
        Matrix::from_vec(1, 3, vec![3.0, 4.0, 5.0]).unwrap(),
        0.5,
    )
    .unwrap();
    let bytes = lora::encode_adapter(&ad);
    let u = |i: usize| u64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    let f = |i: usize| f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().unwrap());
    assert_eq!((u(0), u(1), u(2)), (2, 3, 1));
    assert_eq!(f(3), 0.5);
    assert_eq!((4..9).map(f).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    assert!(lora::decode_adapter(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn savings_example() {
    let s = lora::param_savings(5120, 5120, 128);
    assert_eq!(s.lora_params, 128 * (5120 + 5120));
    assert_eq!(s.full_params, 5120 * 5120);
    assert_eq!(s.lora_params, 1_310_720);
    assert_eq!(s.full_params, 26_214_400);
    assert_eq!(s.ratio, 0.05);
}

#[test]
fn rank_tolerance_must_be_positive() {
    let m = lora::random_matrix(3, 3, 0);
    assert!(matches!(lora::numerical_rank(&m, 0.0), Err(LoraError::BadTolerance(_))));
    assert_eq!(lora::numerical_rank(&Matrix::zeros(4, 4), 1e-8).unwrap(), 0);
}
