//! `-u'' ` on `(0, L)` with time-dependent Robin conditions
//! `∂_ν u + β(t) u = 0`, discretized by P1 elements on a uniform mesh.

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calculus::{
    resolvent_estimate_suite, square_root_property_check, sqrt_holder_suite, EstimateSuiteReport,
    SqrtHolderReport, SuitePlan,
};
use crate::error::{Error, Result};
use crate::evolution::{
    build_table, compare_tables, contractivity_energy_check, energy_check_trajectory,
    evolution_law_residual, p_norm_and_shift, step_solve, CertificateSummary, CertifiedForm, EnergyReport,
    EvolutionTable, Method, Scheme, ShiftOptions, TableOptions, TableStats,
};
use crate::form::{
    dyadic_lags, estimate_bounds, estimate_dini_modulus, uniform_times, verify_dini, DiniModulus,
    DiniReport, FormBounds, NonAutonomousForm, DEFAULT_EPSILONS,
};
use crate::regularity::{gibbs_refinement_study, regularity_report, RegularityOptions, RegularityReport};
use crate::spaces::GelfandTriple;

/// `β(t) = b0 + c t^alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Beta {
    pub b0: f64,
    pub c: f64,
    pub alpha: f64,
}

impl Beta {
    pub fn at(&self, t: f64) -> f64 {
        if self.c == 0.0 {
            self.b0
        } else {
            self.b0 + self.c * t.max(0.0).powf(self.alpha)
        }
    }

    pub fn is_constant(&self) -> bool {
        self.c == 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobinProblem {
    #[serde(rename = "L")]
    pub length: f64,
    pub n: usize,
    /// Coefficient at `x = 0`, and at `x = L` unless `beta_right` is given.
    pub beta: Beta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_right: Option<Beta>,
    pub r0: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

impl RobinProblem {
    pub fn new(length: f64, n: usize, beta: Beta, r0: f64, horizon: f64) -> Self {
        RobinProblem {
            length,
            n,
            beta,
            beta_right: None,
            r0,
            horizon,
        }
    }

    /// `L = 1`, `T = 1`, `β(t) = 1 + t^alpha`.
    pub fn standard(n: usize, alpha: f64, r0: f64) -> Self {
        Self::new(1.0, n, Beta { b0: 1.0, c: 1.0, alpha }, r0, 1.0)
    }

    pub fn beta_left(&self) -> Beta {
        self.beta
    }

    pub fn beta_right(&self) -> Beta {
        self.beta_right.unwrap_or(self.beta)
    }

    pub fn gamma(&self) -> f64 {
        self.r0 + 0.5
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0 && self.length.is_finite()) {
            return Err(Error::Invalid(format!("L must be positive, got {}", self.length)));
        }
        if self.n < 4 {
            return Err(Error::MeshTooCoarse(self.n));
        }
        if !(self.r0 > 0.0 && self.r0 < 0.5) {
            return Err(Error::Invalid(format!("r0 must lie in (0, 1/2), got {}", self.r0)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Invalid(format!("T must be positive, got {}", self.horizon)));
        }
        for b in [self.beta_left(), self.beta_right()] {
            if !(b.b0.is_finite() && b.c.is_finite() && b.alpha > 0.0 && b.alpha <= 1.0) {
                return Err(Error::Invalid(format!(
                    "beta needs finite b0, c and a Hölder exponent in (0, 1], got {b:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let p: RobinProblem = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

/// Mass and stiffness matrices of P1 elements on `n` uniform cells of `(0, L)`.
pub fn assemble_p1(length: f64, n: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let h = length / n as f64;
    let mut mass = DMatrix::zeros(n + 1, n + 1);
    let mut stiff = DMatrix::zeros(n + 1, n + 1);
    for e in 0..n {
        for (a, b, m, k) in [(0, 0, 2.0, 1.0), (0, 1, 1.0, -1.0), (1, 0, 1.0, -1.0), (1, 1, 2.0, 1.0)] {
            mass[(e + a, e + b)] += h / 6.0 * m;
            stiff[(e + a, e + b)] += k / h;
        }
    }
    (mass, stiff)
}

pub struct RobinFem {
    pub triple: Arc<GelfandTriple>,
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    /// `e_0 e_0^T`.
    pub e_left: DMatrix<f64>,
    /// `e_n e_n^T`.
    pub e_right: DMatrix<f64>,
}

/// `gram_H` = mass, `gram_V` = stiffness + mass.
pub fn assemble_fem(problem: &RobinProblem) -> Result<RobinFem> {
    problem.validate()?;
    let n = problem.n;
    let (mass, stiffness) = assemble_p1(problem.length, n);
    let triple = Arc::new(GelfandTriple::new(mass.clone(), &stiffness + &mass)?);
    let mut e_left = DMatrix::zeros(n + 1, n + 1);
    e_left[(0, 0)] = 1.0;
    let mut e_right = DMatrix::zeros(n + 1, n + 1);
    e_right[(n, n)] = 1.0;
    Ok(RobinFem {
        triple,
        mass,
        stiffness,
        e_left,
        e_right,
    })
}

/// `t ↦ K + β_0(t) E_0 + β_L(t) E_L` with `γ = r0 + 1/2`.
pub fn robin_form(problem: &RobinProblem) -> Result<NonAutonomousForm> {
    let fem = assemble_fem(problem)?;
    let (bl, br) = (problem.beta_left(), problem.beta_right());
    let n = problem.n;
    let k = fem.stiffness.clone();
    if bl.is_constant() && br.is_constant() {
        let mut a = k;
        a[(0, 0)] += bl.b0;
        a[(n, n)] += br.b0;
        return NonAutonomousForm::autonomous(fem.triple, problem.horizon, problem.gamma(), a);
    }
    let form = NonAutonomousForm::new(fem.triple, problem.horizon, problem.gamma(), move |t| {
        let mut a = k.clone();
        a[(0, 0)] += bl.at(t);
        a[(n, n)] += br.at(t);
        a
    })?;
    // t^alpha is not Lipschitz at 0 when alpha < 1.
    let rough = [bl, br].iter().any(|b| !b.is_constant() && b.alpha < 1.0);
    Ok(if rough { form.with_singular_times(vec![0.0]) } else { form })
}

/// Knobs of [`run_pipeline`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Intervals of the uniform grid both tables share.
    pub table_intervals: usize,
    pub shift: ShiftOptions,
    pub table: TableOptions,
    pub regularity: RegularityOptions,
    /// Finest scan lag is `T / 2^scan_depth`.
    pub scan_depth: u32,
    /// Mesh sizes of the trace-norm study; empty to skip it.
    pub gibbs_dims: Vec<usize>,
    pub gibbs_separation: f64,
    /// Run the resolvent and square-root suites.
    pub suites: bool,
    pub agreement_tol: f64,
    pub law_tol: f64,
    pub contractivity_tol: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            table_intervals: 8,
            shift: ShiftOptions::default(),
            table: TableOptions::default(),
            regularity: RegularityOptions::default(),
            scan_depth: 14,
            gibbs_dims: vec![32, 64, 128, 256],
            gibbs_separation: 0.1,
            suites: true,
            agreement_tol: 1e-5,
            law_tol: 1e-5,
            contractivity_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSummary {
    pub stepper: TableStats,
    pub neumann: TableStats,
    /// Largest `||U_step - U_neu||_{L(H)}` over shared pairs.
    pub agreement_abs: f64,
    pub agreement_rel: f64,
    pub law_residual_stepper: f64,
    pub law_residual_neumann: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub resolvent: EstimateSuiteReport,
    pub sigma: f64,
    pub sqrt_holder: SqrtHolderReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineFlags {
    pub dini_gate: bool,
    pub certified: bool,
    pub increments_within_certificate: bool,
    pub tables_agree: bool,
    pub evolution_law: bool,
    pub contractive: bool,
    pub energy_inequality: bool,
    pub norm_continuous_v: bool,
    pub norm_continuous_h: bool,
    pub schatten_monotone: bool,
    pub gibbs_consistent: Option<bool>,
    pub suites_finite: Option<bool>,
}

impl PipelineFlags {
    pub fn all_pass(&self) -> bool {
        self.dini_gate
            && self.certified
            && self.increments_within_certificate
            && self.tables_agree
            && self.evolution_law
            && self.contractive
            && self.energy_inequality
            && self.norm_continuous_v
            && self.norm_continuous_h
            && self.schatten_monotone
            && self.gibbs_consistent.unwrap_or(true)
            && self.suites_finite.unwrap_or(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub problem: RobinProblem,
    pub bounds: FormBounds,
    pub shifted_bounds: FormBounds,
    pub dini: DiniReport,
    pub certificate: CertificateSummary,
    pub tables: TableSummary,
    /// Contractivity and trapezoid energy balance on the stepper table.
    pub energy: EnergyReport,
    /// Energy inequality along implicit Euler from H-orthonormal data.
    pub energy_ie: EnergyReport,
    pub regularity: RegularityReport,
    pub suites: Option<SuiteSummary>,
    pub flags: PipelineFlags,
}

pub struct PipelineOutput {
    pub report: PipelineReport,
    pub modulus: DiniModulus,
    pub stepper: EvolutionTable,
    pub neumann: EvolutionTable,
    pub scan: EvolutionTable,
}

/// Uniform nodes plus, for the scans, dyadic clusters of width `2^levels δ`
/// at `s + sep` and below `T - sep`.
pub fn scan_grid(horizon: f64, intervals: usize, delta: f64, levels: usize, sep: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=intervals).map(|k| horizon * k as f64 / intervals as f64).collect();
    let width = 1usize << levels;
    for k in 0..=width {
        g.push(sep + k as f64 * delta);
        g.push(horizon - sep - k as f64 * delta);
    }
    g.retain(|&t| (0.0..=horizon).contains(&t));
    g.sort_by(f64::total_cmp);
    g.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    g
}

/// Stepper table on [`scan_grid`] with the columns the continuity scans read:
/// `s = 0` for the first argument and the cluster below `T - sep` for the
/// second.
pub fn scan_table(
    cert: &CertifiedForm,
    intervals: usize,
    scan_depth: u32,
    reg: &RegularityOptions,
    table: &TableOptions,
) -> Result<EvolutionTable> {
    let horizon = cert.form.horizon();
    let delta = horizon / f64::powi(2.0, scan_depth as i32);
    let grid = scan_grid(horizon, intervals, delta, reg.levels, reg.min_separation);
    let top = horizon - reg.min_separation;
    let bottom = top - (1usize << reg.levels) as f64 * delta;
    let columns: Vec<usize> = (0..grid.len())
        .filter(|&j| j == 0 || (grid[j] <= top + 1e-12 && grid[j] >= bottom - 1e-12))
        .collect();
    let opts = TableOptions {
        columns: Some(columns),
        ..table.clone()
    };
    build_table(cert, &grid, Method::Stepper, &opts)
}

/// Bounds, Dini gate, shift certification, both tables and their checks,
/// continuity scans, trace-norm study, and optionally the suites. Errors
/// carry the stage they came from.
pub fn run_pipeline(problem: &RobinProblem, config: &PipelineConfig) -> Result<PipelineOutput> {
    let form = robin_form(problem).map_err(|e| e.at_stage("assemble"))?;
    let triple = form.triple().clone();
    let horizon = problem.horizon;
    let samples = uniform_times(horizon, 33);
    let bounds = estimate_bounds(&form, &samples).map_err(|e| e.at_stage("bounds"))?;
    let modulus = estimate_dini_modulus(&form, &dyadic_lags(horizon, 5), &samples)
        .map_err(|e| e.at_stage("dini"))?;
    let dini = verify_dini(&modulus, &DEFAULT_EPSILONS);
    modulus.gate().map_err(|e| e.at_stage("dini"))?;

    let cert = p_norm_and_shift(&form, &config.shift).map_err(|e| e.at_stage("shift"))?;
    let shifted = cert.form.clone();
    let shifted_bounds = estimate_bounds(&shifted, &samples).map_err(|e| e.at_stage("bounds"))?;

    let grid: Vec<f64> = (0..=config.table_intervals)
        .map(|k| horizon * k as f64 / config.table_intervals as f64)
        .collect();
    let stepper =
        build_table(&cert, &grid, Method::Stepper, &config.table).map_err(|e| e.at_stage("stepper"))?;
    let neumann =
        build_table(&cert, &grid, Method::Neumann, &config.table).map_err(|e| e.at_stage("neumann"))?;
    let (agreement_abs, agreement_rel) =
        compare_tables(&stepper, &neumann, &triple).map_err(|e| e.at_stage("compare"))?;
    let law_residual_stepper =
        evolution_law_residual(&stepper, &triple).map_err(|e| e.at_stage("checks"))?;
    let law_residual_neumann =
        evolution_law_residual(&neumann, &triple).map_err(|e| e.at_stage("checks"))?;
    let energy = contractivity_energy_check(&stepper, &triple, shifted_bounds.alpha, config.contractivity_tol)
        .map_err(|e| e.at_stage("checks"))?;
    let ie_mesh = config.table.stepper_mesh.build(horizon, 0.0, horizon, &[], shifted.singular_times());
    let ie = step_solve(&shifted, 0.0, triple.pencil_basis(), &ie_mesh, Scheme::ImplicitEuler)
        .map_err(|e| e.at_stage("checks"))?;
    let energy_ie = energy_check_trajectory(&ie, &triple, shifted_bounds.alpha, config.contractivity_tol);

    let reg = &config.regularity;
    let scan = scan_table(&cert, config.table_intervals, config.scan_depth, reg, &config.table)
        .map_err(|e| e.at_stage("scan"))?;
    let mut regularity =
        regularity_report(&scan, &triple, Some(&modulus), reg).map_err(|e| e.at_stage("regularity"))?;
    if !config.gibbs_dims.is_empty() {
        let base = problem.clone();
        let study = gibbs_refinement_study(
            |n| robin_form(&RobinProblem { n, ..base.clone() }),
            &config.gibbs_dims,
            config.gibbs_separation,
            0.0,
            &reg.p_list,
            &config.table.stepper_mesh,
        )
        .map_err(|e| e.at_stage("gibbs"))?;
        regularity.flags.gibbs_consistent = Some(study.gibbs_consistent);
        regularity.trace_norm_refinement = Some(study);
    }

    let suites = if config.suites {
        let psi = crate::calculus::FrozenOperator::of_form(&form, 0.0)
            .map_err(|e| e.at_stage("suites"))?
            .sector_angle();
        let plan = SuitePlan::standard(psi, horizon, 1);
        let resolvent = resolvent_estimate_suite(&form, &plan).map_err(|e| e.at_stage("suites"))?;
        let sigma = square_root_property_check(&form, &uniform_times(horizon, 3))
            .map_err(|e| e.at_stage("suites"))?;
        let pairs = holder_pairs(horizon);
        let sqrt_holder = sqrt_holder_suite(&form, &pairs, &modulus).map_err(|e| e.at_stage("suites"))?;
        Some(SuiteSummary {
            resolvent,
            sigma,
            sqrt_holder,
        })
    } else {
        None
    };

    let flags = PipelineFlags {
        dini_gate: true,
        certified: cert.is_certified(),
        increments_within_certificate: neumann.stats.max_ratio <= cert.estimate + 0.05,
        tables_agree: agreement_abs <= config.agreement_tol,
        evolution_law: law_residual_stepper.max(law_residual_neumann) <= config.law_tol,
        contractive: energy.contractive,
        energy_inequality: energy_ie.energy_holds,
        norm_continuous_v: regularity.flags.norm_continuous_v,
        norm_continuous_h: regularity.flags.norm_continuous_h,
        schatten_monotone: regularity.flags.schatten_monotone,
        gibbs_consistent: regularity.flags.gibbs_consistent,
        suites_finite: suites.as_ref().map(|s| {
            s.resolvent.all_finite()
                && s.sigma.is_finite()
                && s.sqrt_holder.max_ratios.iter().all(|r| r.is_finite())
        }),
    };
    Ok(PipelineOutput {
        report: PipelineReport {
            problem: problem.clone(),
            bounds,
            shifted_bounds,
            dini,
            certificate: cert.summary(),
            tables: TableSummary {
                stepper: stepper.stats.clone(),
                neumann: neumann.stats.clone(),
                agreement_abs,
                agreement_rel,
                law_residual_stepper,
                law_residual_neumann,
            },
            energy,
            energy_ie,
            regularity,
            suites,
            flags,
        },
        modulus,
        stepper,
        neumann,
        scan,
    })
}

/// `(t, s)` pairs at dyadic distances, both orders, for the Hölder suite.
pub fn holder_pairs(horizon: f64) -> Vec<(f64, f64)> {
    let mut pairs = Vec::new();
    for k in 1..=5 {
        let d = horizon / f64::powi(2.0, k);
        for base in [0.0, 0.5 * horizon - 0.5 * d] {
            pairs.push((base + d, base));
        }
    }
    pairs
}
