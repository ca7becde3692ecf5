use evolab::robin::assemble_p1;
use evolab::spaces::random_probes;
use evolab::{CoordinateKind, Error, GelfandTriple, Space};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

fn spd(seed: u64, n: usize, shift: f64) -> DMatrix<f64> {
    let cols = random_probes(n, n, seed);
    let b = DMatrix::from_columns(&cols);
    &b * b.transpose() + DMatrix::identity(n, n) * shift
}

fn fem_triple(n: usize) -> GelfandTriple {
    let (m, k) = assemble_p1(1.0, n);
    GelfandTriple::new(m.clone(), k + m).unwrap()
}

#[test]
fn embedding_constant_examples() {
    let i2 = DMatrix::identity(2, 2);
    assert!((GelfandTriple::new(i2.clone(), i2.clone()).unwrap().c_h() - 1.0).abs() < 1e-14);
    assert!((GelfandTriple::new(i2.clone(), diag(&[1.0, 4.0])).unwrap().c_h() - 1.0).abs() < 1e-14);
    assert!((GelfandTriple::new(i2.clone(), diag(&[0.25, 1.0])).unwrap().c_h() - 2.0).abs() < 1e-14);
}

#[test]
fn construction_errors() {
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(matches!(
        GelfandTriple::new(bad, DMatrix::identity(2, 2)),
        Err(Error::NonHermitian { .. })
    ));
    match GelfandTriple::new(DMatrix::identity(2, 2), diag(&[1.0, -3.0])) {
        Err(Error::NotPositiveDefinite { eigenvalue, .. }) => assert_eq!(eigenvalue, -3.0),
        other => panic!("{other:?}"),
    }
    assert!(GelfandTriple::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).is_err());
}

#[test]
fn interpolation_endpoints_and_midpoint() {
    let t = GelfandTriple::new(DMatrix::identity(2, 2), diag(&[1.0, 16.0])).unwrap();
    let g = |x: f64| t.interpolation_scale(x).unwrap().gram_gamma;
    assert!((g(0.0) - t.gram_h()).abs().max() < 1e-13);
    assert!((g(1.0) - t.gram_v()).abs().max() < 1e-12);
    assert!((g(0.5) - diag(&[1.0, 4.0])).abs().max() < 1e-12);
    assert!(matches!(t.interpolation_scale(1.5), Err(Error::GammaOutOfRange(_))));
}

#[test]
fn norm_examples() {
    let t = GelfandTriple::new(DMatrix::identity(2, 2), diag(&[1.0, 4.0])).unwrap();
    let zero = DVector::zeros(2);
    for s in [Space::H, Space::V, Space::VGamma(0.3)] {
        assert_eq!(t.norm(&zero, CoordinateKind::Primal, s).unwrap(), 0.0);
    }
    for s in [Space::VDual, Space::VGammaDual(0.3)] {
        assert_eq!(t.norm(&zero, CoordinateKind::Action, s).unwrap(), 0.0);
    }
    let e1 = DVector::from_row_slice(&[0.0, 1.0]);
    assert!((t.norm(&e1, CoordinateKind::Primal, Space::V).unwrap() - 2.0).abs() < 1e-15);
    assert!((t.norm(&e1, CoordinateKind::Action, Space::VDual).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(
        t.norm(&e1, CoordinateKind::Action, Space::V),
        Err(Error::KindMismatch(_))
    ));
}

#[test]
fn dual_norm_is_a_sup_over_probes() {
    // |<F, v>| / ||v||_V over a fine angular grid of the unit circle.
    let t = GelfandTriple::new(DMatrix::identity(2, 2), diag(&[1.0, 4.0])).unwrap();
    let f = DVector::from_row_slice(&[0.3, -0.7]);
    let mut best = 0.0f64;
    for k in 0..200_000 {
        let th = k as f64 * std::f64::consts::PI / 200_000.0;
        let v = DVector::from_row_slice(&[th.cos(), th.sin()]);
        let vn = (v.dot(&(t.gram_v() * &v))).sqrt();
        best = best.max(f.dot(&v).abs() / vn);
    }
    let d = t.norm(&f, CoordinateKind::Action, Space::VDual).unwrap();
    assert!((d - best).abs() < 1e-6, "{d} vs {best}");
}

#[test]
fn operator_norm_examples() {
    let t = GelfandTriple::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
    assert!((t.operator_norm(&DMatrix::<f64>::identity(2, 2), Space::V, Space::V).unwrap() - 1.0).abs() < 1e-14);
    assert!((t.operator_norm(&diag(&[2.0, 3.0]), Space::H, Space::H).unwrap() - 3.0).abs() < 1e-14);
}

#[test]
fn operator_norm_against_probe_maximum() {
    let t = GelfandTriple::new(DMatrix::identity(4, 4), diag(&[1.0, 2.0, 3.0, 4.0])).unwrap();
    let k = DMatrix::from_columns(&random_probes(4, 4, 11));
    let exact = t.operator_norm(&k, Space::V, Space::H).unwrap();
    let mut best = 0.0f64;
    for u in random_probes(4, 100_000, 12) {
        let ku = &k * &u;
        let r = ku.norm() / u.dot(&(t.gram_v() * &u)).sqrt();
        best = best.max(r);
    }
    assert!(best <= exact * (1.0 + 1e-12));
    assert!((exact - best) / exact < 1e-3, "{exact} vs {best}");
}

#[test]
fn embedding_singular_value_examples() {
    let g = spd(3, 5, 0.5);
    let t = GelfandTriple::new(g.clone(), g).unwrap();
    assert!(t.embedding_singular_values().iter().all(|s| (s - 1.0).abs() < 1e-12));
    let t = GelfandTriple::new(DMatrix::identity(2, 2), diag(&[1.0, 4.0])).unwrap();
    let s = t.embedding_singular_values();
    assert!((s[0] - 1.0).abs() < 1e-14 && (s[1] - 0.5).abs() < 1e-14);
}

#[test]
fn fem_embedding_decays_like_inverse_k() {
    // Eigenvalues of the Neumann Laplacian on (0, 1) are (kπ)², so the
    // embedding H¹ → L² has s_k = (1 + (kπ)²)^{-1/2} ≈ 1/(kπ).
    let fine = fem_triple(512).embedding_singular_values();
    let coarse = fem_triple(128).embedding_singular_values();
    for k in 5..=30 {
        let pi_k = std::f64::consts::PI * k as f64;
        assert!((fine[k] * pi_k - 1.0).abs() < 0.05, "k = {k}: {}", fine[k] * pi_k);
        assert!((coarse[k] / fine[k] - 1.0).abs() < 0.05, "k = {k}");
    }
}

#[test]
fn embedding_bound_is_attained() {
    let t = GelfandTriple::new(spd(21, 6, 0.3), spd(22, 6, 1.0)).unwrap();
    let c = t.c_h();
    for u in random_probes(6, 10_000, 23) {
        let h = t.norm(&u, CoordinateKind::Primal, Space::H).unwrap();
        let v = t.norm(&u, CoordinateKind::Primal, Space::V).unwrap();
        assert!(h <= c * v * (1.0 + 1e-9));
    }
    // The top pencil vector of (H, V) is the bottom one of (V, H).
    let z = t.pencil_basis().column(0).into_owned();
    let h = t.norm(&z, CoordinateKind::Primal, Space::H).unwrap();
    let v = t.norm(&z, CoordinateKind::Primal, Space::V).unwrap();
    assert!((h - c * v).abs() < 1e-6);
}

#[test]
fn grams_round_trip_through_json() {
    let t = GelfandTriple::new(spd(1, 3, 0.2), spd(2, 3, 1.0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("grams.json");
    t.save_json(&path).unwrap();
    let back = GelfandTriple::load_json(&path).unwrap();
    assert_eq!(back.gram_h(), t.gram_h());
    assert_eq!(back.gram_v(), t.gram_v());
    let complex = r#"{"dim": 1, "gram_H": [[2, 0]], "gram_V": [[3, 0.5]]}"#;
    assert!(GelfandTriple::from_json_str(complex).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dual_embedding_bound(seed in 0u64..10_000) {
        // ||f||_{V'} <= c_H ||H^{-1} f||_H.
        let t = GelfandTriple::new(spd(seed, 4, 0.2), spd(seed + 1, 4, 0.5)).unwrap();
        for f in random_probes(4, 16, seed + 2) {
            let dual = t.norm(&f, CoordinateKind::Action, Space::VDual).unwrap();
            let hf = t.chol_h().solve(&f);
            let h = t.norm(&hf, CoordinateKind::Primal, Space::H).unwrap();
            prop_assert!(dual <= t.c_h() * h * (1.0 + 1e-9));
        }
    }

    #[test]
    fn interpolation_norms_are_log_convex(seed in 0u64..10_000) {
        let t = GelfandTriple::new(spd(seed, 5, 0.2), spd(seed + 7, 5, 0.5)).unwrap();
        let gammas = [0.0, 0.25, 0.5, 0.75, 1.0];
        for u in random_probes(5, 8, seed + 3) {
            let ln: Vec<f64> = gammas
                .iter()
                .map(|&g| t.norm(&u, CoordinateKind::Primal, Space::VGamma(g)).unwrap().ln())
                .collect();
            for k in 1..4 {
                prop_assert!(ln[k] <= 0.5 * (ln[k - 1] + ln[k + 1]) + 1e-9);
            }
            // Interpolation inequality between the endpoints.
            for (k, &g) in gammas.iter().enumerate() {
                prop_assert!(ln[k] <= (1.0 - g) * ln[0] + g * ln[4] + 1e-9);
            }
        }
    }

    #[test]
    fn embedding_power_sums_decrease_in_p(seed in 0u64..10_000, p in 1.0f64..4.0, dp in 0.0f64..3.0) {
        let t = GelfandTriple::new(spd(seed, 6, 0.1), spd(seed + 5, 6, 2.0)).unwrap();
        let s = t.embedding_singular_values();
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        // Σ s^p is nonincreasing in p once every s_k <= 1 (rescale by the top value).
        let top = s[0];
        let sum = |q: f64| s.iter().map(|x| (x / top).powf(q)).sum::<f64>();
        prop_assert!(sum(p + dp) <= sum(p) + 1e-12);
    }

    #[test]
    fn operator_norm_is_submultiplicative(seed in 0u64..10_000) {
        let t = GelfandTriple::new(spd(seed, 4, 0.2), spd(seed + 9, 4, 0.5)).unwrap();
        let a = DMatrix::from_columns(&random_probes(4, 4, seed + 1));
        let b = DMatrix::from_columns(&random_probes(4, 4, seed + 2));
        for s in [Space::H, Space::V] {
            let ab = t.operator_norm(&(&a * &b), s, s).unwrap();
            let na = t.operator_norm(&a, s, s).unwrap();
            let nb = t.operator_norm(&b, s, s).unwrap();
            prop_assert!(ab <= na * nb * (1.0 + 1e-10));
        }
    }
}
