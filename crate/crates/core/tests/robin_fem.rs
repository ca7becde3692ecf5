use evolab::robin::{assemble_fem, assemble_p1, robin_form, run_pipeline, Beta, PipelineConfig, RobinProblem};
use evolab::{Error, GelfandTriple};
use nalgebra::DMatrix;

const CONSTANT_ONE: Beta = Beta { b0: 1.0, c: 0.0, alpha: 1.0 };

/// Smallest `k > 0` with `(k² − β²) sin kL − 2βk cos kL = 0`, by bisection.
fn first_robin_root(beta: f64, length: f64) -> f64 {
    let f = |k: f64| (k * k - beta * beta) * (k * length).sin() - 2.0 * beta * k * (k * length).cos();
    let (mut lo, mut hi) = (1e-6, std::f64::consts::PI / length);
    assert!(f(lo) * f(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(lo) * f(mid) <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn lowest_fem_eigenvalue(n: usize, beta: f64) -> f64 {
    let p = RobinProblem::new(1.0, n, Beta { b0: beta, ..CONSTANT_ONE }, 0.3, 1.0);
    let fem = assemble_fem(&p).unwrap();
    let a = robin_form(&p).unwrap().at(0.0);
    // c_H² of (mass, A) is the largest value of ||u||²/a(u, u).
    let c = GelfandTriple::new(fem.mass, a).unwrap().c_h();
    1.0 / (c * c)
}

#[test]
fn hand_assembly_of_two_cells() {
    let (m, k) = assemble_p1(1.0, 2);
    let h = 0.5;
    let m_want = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 4.0, 1.0, 0.0, 1.0, 2.0]) * (h / 6.0);
    let k_want = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]) / h;
    assert!((m - m_want).abs().max() < 1e-15);
    assert!((k - k_want).abs().max() < 1e-15);
}

#[test]
fn partition_of_unity() {
    let (m, k) = assemble_p1(2.5, 13);
    assert!((m.sum() - 2.5).abs() < 1e-13);
    for r in 0..14 {
        assert!(k.row(r).sum().abs() < 1e-12);
    }
}

#[test]
fn coarse_mesh_is_refused() {
    let p = RobinProblem::new(1.0, 3, CONSTANT_ONE, 0.3, 1.0);
    assert!(matches!(assemble_fem(&p), Err(Error::MeshTooCoarse(3))));
}

#[test]
fn lowest_eigenvalue_solves_the_characteristic_equation() {
    let k = first_robin_root(1.0, 1.0);
    let lambda = k * k;
    assert!((lambda - 1.7071).abs() < 1e-3, "{lambda}");
    let err = (lowest_fem_eigenvalue(64, 1.0) - lambda).abs();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn eigenvalue_error_is_second_order() {
    let lambda = first_robin_root(1.0, 1.0).powi(2);
    let dims = [16, 32, 64, 128];
    let errs: Vec<f64> = dims.iter().map(|&n| (lowest_fem_eigenvalue(n, 1.0) - lambda).abs()).collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((order - 2.0).abs() < 0.2, "orders from {errs:?}");
    }
}

#[test]
fn boundary_perturbation_has_rank_two() {
    let f = robin_form(&RobinProblem::standard(24, 0.5, 0.3)).unwrap();
    for (t, s) in [(0.9, 0.1), (0.5, 0.0), (1.0, 0.999)] {
        let d = f.at(t) - f.at(s);
        let sv = d.singular_values();
        let big = sv.iter().filter(|&&x| x > 1e-12 * sv.max()).count();
        assert!(big <= 2, "rank {big} at ({t}, {s})");
    }
}

#[test]
fn rough_exponents_are_refused_by_the_gate() {
    // 0.26 < (0.49 + 1/2)/2.
    let p = RobinProblem::standard(16, 0.26, 0.49);
    let err = run_pipeline(&p, &PipelineConfig::default()).err().expect("gate must refuse");
    assert!(matches!(err, Error::Stage { stage: "dini", .. }), "{err}");
    assert!(matches!(err.root(), Error::DiniViolated { .. }));
}

#[test]
fn problem_json_layout() {
    let text = r#"{"L":1.0, "n":64, "beta":{"b0":1.0, "c":1.0, "alpha":0.5}, "r0":0.3, "T":1.0}"#;
    let p = RobinProblem::from_json_str(text).unwrap();
    assert_eq!(p, RobinProblem::standard(64, 0.5, 0.3));
    assert!((p.gamma() - 0.8).abs() < 1e-15);
    assert!(RobinProblem::from_json_str(r#"{"L":1.0, "n":64}"#).is_err());
}
