use std::sync::Arc;

use evolab::evolution::{build_table, CertifiedForm, Method, MeshSpec, TableOptions};
use evolab::regularity::{
    dyadic_deltas, gibbs_refinement_study, norm_continuity_scan, propagator, regularity_report, schatten_norm,
    schatten_norm_matrix, Geometry, RegularityOptions, Variation,
};
use evolab::robin::{robin_form, RobinProblem};
use evolab::spaces::random_probes;
use evolab::{Error, GelfandTriple, NonAutonomousForm, Space};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

fn spd(seed: u64, n: usize, shift: f64) -> DMatrix<f64> {
    let b = DMatrix::from_columns(&random_probes(n, n, seed));
    &b * b.transpose() + DMatrix::identity(n, n) * shift
}

fn mesh() -> MeshSpec {
    MeshSpec {
        base_steps: 128,
        ratio: 0.7,
        floor: 1e-9,
    }
}

#[test]
fn trace_norm_of_autonomous_symmetric_propagator() {
    // With H = L Lᵀ, U(t, s) is similar in H to exp(-(t-s) L⁻¹ A L⁻ᵀ).
    let (h, v) = (spd(1, 6, 0.5), spd(2, 6, 1.0) * 3.0);
    let a = &v + spd(3, 6, 0.0);
    let triple = Arc::new(GelfandTriple::new(h.clone(), v).unwrap());
    let form = NonAutonomousForm::autonomous(triple.clone(), 1.0, 0.0, a.clone()).unwrap();
    let l = h.clone().cholesky().unwrap().l();
    let li = l.clone().try_inverse().unwrap();
    let sym = &li * &a * li.transpose();
    let eig = (0.5 * (&sym + sym.transpose())).symmetric_eigen();
    let tau = 0.4;
    let u = propagator(&form, 0.9, 0.5, &mesh()).unwrap();
    for p in [1.0, 2.0, 3.5] {
        let want = eig.eigenvalues.iter().map(|l| (-tau * l).exp().powf(p)).sum::<f64>().powf(1.0 / p);
        let got = schatten_norm_matrix(&triple, &u, Geometry::HH, p).unwrap();
        assert!((got - want).abs() < 1e-7 * want, "p {p}: {got} vs {want}");
    }
}

#[test]
fn diagonal_modulus_matches_closed_form() {
    // U(t, s) = diag(e^{-(t-s)λ_k}) commutes with both Grams.
    let lambda = [1.0, 3.0];
    let triple = Arc::new(GelfandTriple::new(DMatrix::identity(2, 2), diag(&[1.0, 4.0])).unwrap());
    let form = NonAutonomousForm::autonomous(triple.clone(), 1.0, 0.0, diag(&lambda)).unwrap();
    let grid: Vec<f64> = (0..=32).map(|k| k as f64 / 32.0).collect();
    let opts = TableOptions {
        columns: Some(vec![0]),
        ..TableOptions::default()
    };
    let table = build_table(&CertifiedForm::uncertified(form), &grid, Method::Stepper, &opts).unwrap();
    let deltas = dyadic_deltas(1.0 / 32.0, 4);
    let sep = 0.25;
    for space in [Space::H, Space::V] {
        let m = norm_continuity_scan(&table, &triple, space, Variation::FirstArgument, 0, &deltas, sep, None).unwrap();
        for (d, got) in m.deltas.iter().zip(&m.values) {
            let want = lambda
                .iter()
                .map(|l| (-l * sep).exp() * (1.0 - (-l * d).exp()))
                .fold(0.0, f64::max);
            assert!((got - want).abs() < 1e-8, "{space:?} δ {d}: {got} vs {want}");
        }
        assert!(m.monotone);
    }
}

#[test]
fn fractional_p_is_refused() {
    let triple = GelfandTriple::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
    let m = DMatrix::identity(2, 2);
    assert!(matches!(
        schatten_norm_matrix(&triple, &m, Geometry::HH, 0.5),
        Err(Error::POutOfRange(p)) if p == 0.5
    ));
    assert!(matches!(schatten_norm(&[1.0], f64::INFINITY), Err(Error::POutOfRange(_))));
    let gen = |n: usize| robin_form(&RobinProblem::standard(n, 0.5, 0.3));
    let err = gibbs_refinement_study(gen, &[4, 8], 1.0, 0.5, &[1.0, 0.5], &mesh()).unwrap_err();
    assert!(matches!(err, Error::POutOfRange(_)));
}

#[test]
fn report_on_a_diagonal_table() {
    let triple = Arc::new(GelfandTriple::new(DMatrix::identity(3, 3), diag(&[1.0, 4.0, 9.0])).unwrap());
    let form = NonAutonomousForm::autonomous(triple.clone(), 1.0, 0.0, diag(&[1.0, 4.0, 9.0])).unwrap();
    let grid: Vec<f64> = (0..=64).map(|k| k as f64 / 64.0).collect();
    let table = build_table(&CertifiedForm::uncertified(form), &grid, Method::Stepper, &TableOptions::default()).unwrap();
    let opts = RegularityOptions {
        continuity_threshold: 0.05,
        ..RegularityOptions::default()
    };
    let r = regularity_report(&table, &triple, None, &opts).unwrap();
    assert!(r.flags.schatten_monotone);
    assert!(r.flags.norm_continuous_h && r.flags.norm_continuous_v);
    // Two pairs, three geometries each.
    assert_eq!(r.sv_profiles.len(), 6);
    let first = &r.sv_profiles[0];
    let tau = first.t - first.s;
    for (k, l) in [9.0, 4.0, 1.0].iter().rev().enumerate() {
        assert!((first.values[k] - (-tau * l).exp()).abs() < 1e-8);
    }
}

#[test]
fn embedding_trace_grows_logarithmically() {
    // s_k ≈ 1/(kπ), so each doubling adds about ln 2 / π to Σ s_k.
    let gen = |n: usize| robin_form(&RobinProblem::standard(n, 0.5, 0.3));
    let study = gibbs_refinement_study(gen, &[16, 32, 64, 128], 1.0, 0.5, &[1.0, 2.0], &mesh()).unwrap();
    let step = std::f64::consts::LN_2 / std::f64::consts::PI;
    for w in study.rows.windows(2) {
        let inc = w[1].embedding_s1 - w[0].embedding_s1;
        assert!((inc / step - 1.0).abs() < 0.1, "increment {inc}");
    }
    // The propagator's trace norm settles while the embedding's does not.
    let s1 = study.top_change.iter().find(|x| x.0 == 1.0).unwrap().1;
    assert!(s1 < 0.02, "{s1}");
    let last = study.rows.last().unwrap();
    assert!(last.schatten[0].1 < last.embedding_s1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schatten_norms_decrease_in_p(
        values in prop::collection::vec(0.0f64..10.0, 1..12),
        p in 1.0f64..6.0,
        dp in 0.0f64..6.0,
    ) {
        let a = schatten_norm(&values, p).unwrap();
        let b = schatten_norm(&values, p + dp).unwrap();
        prop_assert!(b <= a * (1.0 + 1e-12));
        let top = values.iter().fold(0.0f64, |m, v| m.max(*v));
        prop_assert!(b >= top * (1.0 - 1e-12));
    }

    #[test]
    fn holder_inequality_for_schatten_classes(seed in 0u64..10_000, p in 1.0f64..4.0, q in 1.0f64..4.0) {
        // ||AB||_r <= ||A||_p ||B||_q with 1/r = 1/p + 1/q, whenever r >= 1.
        let r = 1.0 / (1.0 / p + 1.0 / q);
        prop_assume!(r >= 1.0);
        let triple = GelfandTriple::new(spd(seed, 5, 0.3), spd(seed + 1, 5, 1.0)).unwrap();
        let a = DMatrix::from_columns(&random_probes(5, 5, seed + 2));
        let b = DMatrix::from_columns(&random_probes(5, 5, seed + 3));
        let ab = schatten_norm_matrix(&triple, &(&a * &b), Geometry::HH, r).unwrap();
        let na = schatten_norm_matrix(&triple, &a, Geometry::HH, p).unwrap();
        let nb = schatten_norm_matrix(&triple, &b, Geometry::HH, q).unwrap();
        prop_assert!(ab <= na * nb * (1.0 + 1e-9));
    }
}
