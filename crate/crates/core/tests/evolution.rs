use std::sync::Arc;

use evolab::evolution::{
    build_table, compare_tables, contractivity_energy_check, duhamel_solve, energy_check_trajectory,
    evolution_law_residual, kernel_norm_bound, neumann_solve, p_norm_and_shift, step_solve,
    step_solve_extrapolated, unshift, CertifiedForm, MeshSpec, Method, NeumannOptions, Scheme, ShiftOptions,
    TableOptions, Trajectory, CERTIFIED_NORM,
};
use evolab::form::uniform_times;
use evolab::problem::fixture;
use evolab::spaces::random_probes;
use evolab::{Error, GelfandTriple, NonAutonomousForm, Space};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn scalar(a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> NonAutonomousForm {
    let one = DMatrix::from_element(1, 1, 1.0);
    let triple = Arc::new(GelfandTriple::new(one.clone(), one).unwrap());
    NonAutonomousForm::new(triple, 1.0, 0.0, move |t| DMatrix::from_element(1, 1, a(t))).unwrap()
}

/// `exp(-∫_s^t (1 + r) dr)`.
fn exact_linear(t: f64, s: f64) -> f64 {
    (-(t - s) - 0.5 * (t * t - s * s)).exp()
}

fn spd(seed: u64, n: usize, shift: f64) -> DMatrix<f64> {
    let b = DMatrix::from_columns(&random_probes(n, n, seed));
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * shift
}

/// `A(t) = A0 + sin(2t) B` with symmetric `A0`, `B` and `A0 - |B| > 0`.
fn hermitian16() -> NonAutonomousForm {
    let h = spd(1, 16, 0.5);
    let v = spd(2, 16, 1.0) * 4.0;
    let a0 = &v * 2.0;
    let b = spd(3, 16, 0.0);
    let triple = Arc::new(GelfandTriple::new(h, v).unwrap());
    NonAutonomousForm::new(triple, 1.0, 0.5, move |t| &a0 + &b * (2.0 * t).sin()).unwrap()
}

fn nonsymmetric2() -> NonAutonomousForm {
    let eye = DMatrix::identity(2, 2);
    let triple = Arc::new(GelfandTriple::new(eye.clone(), eye).unwrap());
    NonAutonomousForm::new(triple, 1.0, 0.5, |t| {
        DMatrix::from_row_slice(2, 2, &[2.0 + t, 1.0, -0.5 * t, 3.0])
    })
    .unwrap()
}

#[test]
fn neumann_reproduces_the_scalar_closed_form() {
    let f = scalar(|t| 1.0 + t);
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    assert!(cert.is_certified() && cert.mu > 0.0);
    for s in [0.0, 0.3] {
        let checkpoints: Vec<f64> = (0..=8).map(|k| s + (1.0 - s) * k as f64 / 8.0).collect();
        let x = DMatrix::from_element(1, 1, 1.0);
        let sol = neumann_solve(&cert, s, &x, &checkpoints, &NeumannOptions::default()).unwrap();
        let u = unshift(&sol.trajectory, cert.mu, s);
        for &t in &checkpoints {
            let got = u.at(t).unwrap()[(0, 0)];
            let want = exact_linear(t, s);
            assert!((got - want).abs() / want < 1e-6, "s = {s}, t = {t}: {got} vs {want}");
        }
    }
}

#[test]
fn stepper_reproduces_the_scalar_closed_form() {
    let f = scalar(|t| 1.0 + t);
    let grid = uniform_times(1.0, 257);
    let x = DMatrix::from_element(1, 1, 1.0);
    let cn = step_solve_extrapolated(&f, 0.0, &x, &grid, Scheme::CrankNicolson, None).unwrap();
    let ie = step_solve(&f, 0.0, &x, &grid, Scheme::ImplicitEuler).unwrap();
    let (mut e_cn, mut e_ie) = (0.0f64, 0.0f64);
    for (k, &t) in grid.iter().enumerate() {
        e_cn = e_cn.max((cn.values[k][(0, 0)] - exact_linear(t, 0.0)).abs());
        e_ie = e_ie.max((ie.values[k][(0, 0)] - exact_linear(t, 0.0)).abs());
    }
    assert!(e_cn < 1e-9, "{e_cn}");
    assert!(e_ie < 2e-3 && e_ie > 1e-5, "{e_ie}");
}

#[test]
fn neumann_and_stepper_agree_on_hermitian_family() {
    let f = hermitian16();
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    let grid = uniform_times(1.0, 5);
    let opts = TableOptions::default();
    let stepper = build_table(&cert, &grid, Method::Stepper, &opts).unwrap();
    let neumann = build_table(&cert, &grid, Method::Neumann, &opts).unwrap();
    let (abs, _) = compare_tables(&stepper, &neumann, f.triple()).unwrap();
    assert!(abs < 1e-5, "{abs}");
    assert!(evolution_law_residual(&neumann, f.triple()).unwrap() < 1e-5);
    assert!(neumann.stats.max_ratio <= cert.estimate + 0.05, "{:?}", neumann.stats);
}

#[test]
fn neumann_and_stepper_agree_on_nonsymmetric_family() {
    let f = nonsymmetric2();
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    let grid = uniform_times(1.0, 5);
    let opts = TableOptions::default();
    let stepper = build_table(&cert, &grid, Method::Stepper, &opts).unwrap();
    let neumann = build_table(&cert, &grid, Method::Neumann, &opts).unwrap();
    let (abs, _) = compare_tables(&stepper, &neumann, f.triple()).unwrap();
    assert!(abs < 1e-5, "{abs}");
}

#[test]
fn autonomous_neumann_table_obeys_the_law_exactly() {
    let f = fixture("a4").unwrap().build().unwrap();
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    assert_eq!(cert.mu, 0.0);
    let grid = uniform_times(1.0, 9);
    let t = build_table(&cert, &grid, Method::Neumann, &TableOptions::default()).unwrap();
    assert!(evolution_law_residual(&t, f.triple()).unwrap() < 1e-12);
    for (&(i, j), m) in &t.entries {
        let want = (-4.0 * (grid[i] - grid[j])).exp();
        assert!((m[(0, 0)] - want).abs() < 1e-13);
    }
}

#[test]
fn neumann_refuses_uncertified_forms() {
    let cert = CertifiedForm::uncertified(scalar(|t| 1.0 + t));
    let x = DMatrix::from_element(1, 1, 1.0);
    assert!(matches!(
        neumann_solve(&cert, 0.0, &x, &[], &NeumannOptions::default()),
        Err(Error::NoCertifiedShift { .. })
    ));
    assert!(build_table(&cert, &[0.0, 1.0], Method::Neumann, &TableOptions::default()).is_err());
}

#[test]
fn kernel_bound_falls_as_the_shift_grows() {
    let f = hermitian16();
    let bounds: Vec<f64> = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0]
        .iter()
        .map(|&mu| kernel_norm_bound(&f.shifted(mu), 0.0).unwrap())
        .collect();
    assert!(bounds.windows(2).all(|w| w[1] <= w[0]), "{bounds:?}");
    assert!(*bounds.last().unwrap() < CERTIFIED_NORM);
}

#[test]
fn increments_shrink_at_the_certified_rate() {
    let f = scalar(|t| 1.0 + 3.0 * t);
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    let x = DMatrix::from_element(1, 1, 1.0);
    let sol = neumann_solve(&cert, 0.0, &x, &[], &NeumannOptions::default()).unwrap();
    assert!(sol.iterations >= 2);
    for r in &sol.ratios {
        assert!(*r <= cert.estimate + 0.05, "{r} vs {}", cert.estimate);
    }
}

/// Simpson oracle for `∫_0^t exp(-∫_r^t a) dr` with `a = 1 + r`.
fn duhamel_oracle(t: f64) -> f64 {
    let n = 2000;
    let h = t / n as f64;
    let g = |r: f64| exact_linear(t, r);
    let mut acc = g(0.0) + g(t);
    for k in 1..n {
        acc += if k % 2 == 1 { 4.0 } else { 2.0 } * g(k as f64 * h);
    }
    acc * h / 3.0
}

#[test]
fn duhamel_matches_quadrature_oracle_for_time_dependent_scalar() {
    let f = scalar(|t| 1.0 + t);
    let grid = uniform_times(1.0, 65);
    let table = build_table(&CertifiedForm::uncertified(f.clone()), &grid, Method::Stepper, &TableOptions::default())
        .unwrap();
    let one = |_: f64| DMatrix::from_element(1, 1, 1.0);
    let r = duhamel_solve(&f, &table, &one, &MeshSpec { base_steps: 256, ratio: 0.7, floor: 1e-9 }).unwrap();
    for (t, v) in r.stepped.times.iter().zip(&r.stepped.values) {
        assert!((v[(0, 0)] - duhamel_oracle(*t)).abs() < 1e-8, "t = {t}");
    }
    assert!(r.summary.max_difference < 1e-4, "{}", r.summary.max_difference);
}

#[test]
fn duhamel_rejects_a_table_of_another_shift() {
    let f = scalar(|t| 1.0 + t);
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    let grid = uniform_times(1.0, 5);
    let table = build_table(&cert, &grid, Method::Stepper, &TableOptions::default()).unwrap();
    let one = |_: f64| DMatrix::from_element(1, 1, 1.0);
    assert!(duhamel_solve(&f, &table, &one, &MeshSpec { base_steps: 64, ratio: 0.7, floor: 1e-9 }).is_err());
}

#[test]
fn shifted_hermitian_family_is_contractive() {
    let f = hermitian16();
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    let grid = uniform_times(1.0, 5);
    let t = build_table(&cert, &grid, Method::Stepper, &TableOptions::default()).unwrap();
    let alpha = evolab::form::estimate_bounds(&cert.form, &uniform_times(1.0, 33)).unwrap().alpha;
    let rep = contractivity_energy_check(&t, cert.form.triple(), alpha, 1e-10).unwrap();
    assert!(rep.contractive, "{rep:?}");
    let mesh = TableOptions::default().stepper_mesh.build(1.0, 0.0, 1.0, &[], &[]);
    let ie = step_solve(&cert.form, 0.0, f.triple().pencil_basis(), &mesh, Scheme::ImplicitEuler).unwrap();
    let rep = energy_check_trajectory(&ie, f.triple(), alpha, 1e-10);
    assert!(rep.energy_holds && rep.contractive, "{rep:?}");
    for &(_, _, h, _) in &t.pair_norms(f.triple()).unwrap() {
        assert!(h <= 1.0 + 1e-10);
    }
}

#[test]
fn zero_data_gives_zero_energy() {
    let f = hermitian16();
    let mesh = uniform_times(1.0, 33);
    let z = step_solve(&f, 0.0, &DMatrix::zeros(16, 2), &mesh, Scheme::ImplicitEuler).unwrap();
    let rep = energy_check_trajectory(&z, f.triple(), 1.0, 1e-12);
    assert_eq!((rep.max_h_norm, rep.worst_energy_gap), (0.0, 0.0));
}

#[test]
fn uniform_v_bound_is_stable_under_refinement() {
    let f = hermitian16();
    let cert = p_norm_and_shift(&f, &ShiftOptions::default()).unwrap();
    let max_v = |m: usize| {
        let t = build_table(&cert, &uniform_times(1.0, m), Method::Stepper, &TableOptions::default()).unwrap();
        t.pair_norms(f.triple()).unwrap().iter().map(|x| x.3).fold(0.0, f64::max)
    };
    let (a, b) = (max_v(5), max_v(9));
    assert!(a.is_finite() && (a / b - 1.0).abs() < 0.05, "{a} vs {b}");
    let h_to_v = f.triple().operator_norm(
        &build_table(&cert, &[0.0, 0.5], Method::Stepper, &TableOptions::default()).unwrap().entries[&(1, 0)],
        Space::H,
        Space::V,
    );
    assert!(h_to_v.unwrap().is_finite());
}

#[test]
fn table_file_round_trip() {
    let f = nonsymmetric2();
    let t = build_table(&CertifiedForm::uncertified(f), &uniform_times(1.0, 4), Method::Stepper, &TableOptions::default())
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.json");
    t.save_json(&path).unwrap();
    assert_eq!(evolab::evolution::EvolutionTable::load_json(&path).unwrap(), t);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mesh_is_sorted_and_contains_its_anchors(
        base in 1usize..300,
        ratio in 0.3f64..0.95,
        s in 0.0f64..0.9,
        len in 0.01f64..1.0,
        req in proptest::collection::vec(0.0f64..1.0, 0..6),
        sing in proptest::collection::vec(0.0f64..1.0, 0..3),
    ) {
        let end = (s + len).min(1.0);
        prop_assume!(end > s);
        let spec = MeshSpec { base_steps: base, ratio, floor: 1e-9 };
        let nodes = spec.build(1.0, s, end, &req, &sing);
        prop_assert_eq!(nodes[0], s);
        prop_assert_eq!(*nodes.last().unwrap(), end);
        prop_assert!(nodes.windows(2).all(|w| w[1] > w[0]));
        let d = 1.0 / base as f64;
        prop_assert!(nodes.windows(2).all(|w| w[1] - w[0] <= d * (1.0 + 1e-9)));
        for r in req.iter().filter(|&&r| r >= s && r <= end) {
            prop_assert!(nodes.iter().any(|x| (x - r).abs() <= 1e-12));
        }
    }

    #[test]
    fn unshift_inverts_itself(mu in 0.0f64..20.0, s in 0.0f64..0.5) {
        let times: Vec<f64> = (0..6).map(|k| s + 0.1 * k as f64).collect();
        let values = times.iter().map(|t| DMatrix::from_element(2, 1, 1.0 + t)).collect();
        let traj = Trajectory { s, times, values, fallback_steps: 0 };
        let back = unshift(&unshift(&traj, mu, s), -mu, s);
        for (a, b) in back.values.iter().zip(&traj.values) {
            prop_assert!((a - b).norm() <= 1e-12 * b.norm());
        }
    }

    #[test]
    fn scalar_stepper_is_monotone_in_the_coefficient(c in 0.0f64..3.0, dc in 0.01f64..2.0) {
        let x = DMatrix::from_element(1, 1, 1.0);
        let grid = uniform_times(1.0, 33);
        let lo = step_solve(&scalar(move |t| c * (1.0 + t)), 0.0, &x, &grid, Scheme::ImplicitEuler).unwrap();
        let hi = step_solve(&scalar(move |t| (c + dc) * (1.0 + t)), 0.0, &x, &grid, Scheme::ImplicitEuler).unwrap();
        for (a, b) in lo.values.iter().zip(&hi.values).skip(1) {
            prop_assert!(b[(0, 0)] < a[(0, 0)] && b[(0, 0)] > 0.0);
        }
    }
}
