//! `U(·, s) x = Σ_k P_s^k U_1(·, s) x`, with `U_1(τ, s) = e^{-(τ-s)A(τ)}` and
//!
//! ```text
//! (P_s h)(τ) = ∫_s^τ e^{-(τ-r)𝒜(τ)} (𝒜(τ) - 𝒜(r)) h(r) dr.
//! ```
//!
//! `h` is interpolated piecewise linearly on a mesh graded toward `s` and
//! toward the form's singular times; the exponential is integrated exactly
//! against each linear piece (mode by mode, or node by node on the contour).

use nalgebra::{ComplexField, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{column_norm_max, MeshSpec, Trajectory};
use crate::calculus::{ContourSemigroup, FrozenOperator, SemigroupBackend};
use crate::error::{Error, Result};
use crate::form::{dyadic_lags, estimate_dini_modulus, uniform_times, NonAutonomousForm};
use crate::linalg::C64;
use crate::spaces::{CoordinateKind, GelfandTriple, Space};

/// The series is certified when the shifted `P_s` has norm below this.
pub const CERTIFIED_NORM: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannOptions {
    pub tol: f64,
    pub mesh: MeshSpec,
    pub max_iter: usize,
    pub backend: SemigroupBackend,
}

impl Default for NeumannOptions {
    fn default() -> Self {
        NeumannOptions {
            tol: 1e-8,
            mesh: MeshSpec {
                base_steps: 64,
                ratio: 0.85,
                floor: 1e-9,
            },
            max_iter: 200,
            backend: SemigroupBackend::Auto,
        }
    }
}

/// `μ_k(z) = ∫_0^1 w^k e^{-zw} dw`, `k = 0..=3`.
fn moments<T: ComplexField<RealField = f64> + Copy>(z: T) -> [T; 4] {
    let mut mu = [T::zero(); 4];
    if z.modulus() < 1.0 {
        let mut term = T::one(); // (-z)^j / j!
        for j in 0..30 {
            for (k, m) in mu.iter_mut().enumerate() {
                *m += term * T::from_real(1.0 / (j + k + 1) as f64);
            }
            term = term * (-z) * T::from_real(1.0 / (j + 1) as f64);
            if term.modulus() < 1e-18 {
                break;
            }
        }
    } else {
        let e = (-z).exp();
        mu[0] = (T::one() - e) / z;
        for k in 1..4 {
            mu[k] = (mu[k - 1] * T::from_real(k as f64) - e) / z;
        }
    }
    mu
}

/// Local cubic interpolation on one panel `[r_p, r_{p+1}]`, in the variable
/// `w = (r_{p+1} - r) / ℓ`.
#[derive(Debug, Clone)]
struct PanelRule {
    first: usize,
    /// `coef[m][k]`: coefficient of `w^k` in the Lagrange basis polynomial
    /// of node `first + m`.
    coef: Vec<[f64; 4]>,
}

impl PanelRule {
    /// Stencil of up to four nodes around panel `p`, none beyond `last`.
    fn new(mesh: &[f64], p: usize, last: usize) -> Self {
        let mut first = p.saturating_sub(1);
        let mut end = (first + 3).min(last);
        if end - first < 3 {
            first = end.saturating_sub(3);
            end = (first + 3).min(last);
        }
        let (b, len) = (mesh[p + 1], mesh[p + 1] - mesh[p]);
        let w: Vec<f64> = (first..=end).map(|k| (b - mesh[k]) / len).collect();
        let coef = (0..w.len())
            .map(|m| {
                let mut poly = [1.0, 0.0, 0.0, 0.0];
                let mut deg = 0;
                let mut denom = 1.0;
                for (k, &wk) in w.iter().enumerate() {
                    if k == m {
                        continue;
                    }
                    for d in (0..=deg).rev() {
                        poly[d + 1] += poly[d];
                        poly[d] *= -wk;
                    }
                    deg += 1;
                    denom *= w[m] - wk;
                }
                poly.map(|c| c / denom)
            })
            .collect();
        PanelRule { first, coef }
    }
}

/// Rules for every panel, plus the variant used when the panel ends at `τ`.
struct Rules {
    interior: Vec<PanelRule>,
    closing: Vec<PanelRule>,
}

impl Rules {
    fn new(mesh: &[f64]) -> Self {
        let m = mesh.len();
        Rules {
            interior: (0..m - 1).map(|p| PanelRule::new(mesh, p, m - 1)).collect(),
            closing: (0..m - 1).map(|p| PanelRule::new(mesh, p, p + 1)).collect(),
        }
    }
}

/// Weights `c_j` with `∫_{r_0}^{r_i} e^{-(r_i - r)ζ} g(r) dr ≈ Σ_j c_j g(r_j)`.
fn product_weights<T: ComplexField<RealField = f64> + Copy>(
    mesh: &[f64],
    rules: &Rules,
    i: usize,
    zeta: T,
    out: &mut [T],
) {
    out[..=i].iter_mut().for_each(|c| *c = T::zero());
    let tau = mesh[i];
    // Lags grow as p falls; once Re ζ > 0 has damped a panel below roundoff
    // every earlier one is smaller still.
    let decaying = zeta.real() > 0.0;
    for p in (0..i).rev() {
        let len = mesh[p + 1] - mesh[p];
        let e = (zeta * T::from_real(mesh[p + 1] - tau)).exp();
        if e.modulus() < 1e-20 {
            if decaying {
                break;
            }
            continue;
        }
        let short;
        let rule = if i < 3 {
            short = PanelRule::new(mesh, p, i);
            &short
        } else if p + 2 > i {
            &rules.closing[p]
        } else {
            &rules.interior[p]
        };
        let mu = moments(zeta * T::from_real(len));
        let scale = e * T::from_real(len);
        for (m, c) in rule.coef.iter().enumerate() {
            let mut acc = T::zero();
            for k in 0..4 {
                acc += mu[k] * T::from_real(c[k]);
            }
            out[rule.first + m] += scale * acc;
        }
    }
}

enum Frozen {
    /// `A Z = H Z Λ`, `Z^T H Z = I`.
    Spectral { z: DMatrix<f64>, lambda: DVector<f64> },
    Contour(ContourSemigroup),
}

/// Frozen operators at every node of one mesh on `[s, T]`.
pub(crate) struct Kernel {
    mesh: Vec<f64>,
    rules: Rules,
    a: Vec<DMatrix<f64>>,
    frozen: Vec<Frozen>,
    gram_h: DMatrix<f64>,
}

impl Kernel {
    pub(crate) fn new(
        form: &NonAutonomousForm,
        mesh: Vec<f64>,
        backend: SemigroupBackend,
    ) -> Result<Self> {
        if mesh.len() < 2 {
            return Err(Error::GridTooCoarse("mesh needs at least two nodes".into()));
        }
        let min_gap = mesh
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min);
        let a: Vec<DMatrix<f64>> = mesh.iter().map(|&t| form.at(t)).collect();
        let triple = form.triple().clone();
        let frozen = a
            .par_iter()
            .map(|ai| -> Result<Frozen> {
                let op = FrozenOperator::new(triple.clone(), ai.clone())?;
                let spectral = match backend {
                    SemigroupBackend::Auto => op.is_symmetric(),
                    SemigroupBackend::Spectral => true,
                    SemigroupBackend::Contour => false,
                };
                if spectral {
                    let p = op.eigen().ok_or_else(|| {
                        Error::Invalid("spectral backend needs a symmetric operator".into())
                    })?;
                    Ok(Frozen::Spectral {
                        z: p.vectors.clone(),
                        lambda: p.values.clone(),
                    })
                } else {
                    let spec = op.contour(min_gap)?;
                    Ok(Frozen::Contour(op.contour_semigroup(&spec)?))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Kernel {
            rules: Rules::new(&mesh),
            mesh,
            a,
            frozen,
            gram_h: triple.gram_h().clone(),
        })
    }

    pub(crate) fn mesh(&self) -> &[f64] {
        &self.mesh
    }

    /// `U_1(τ_i, s) x` at every node.
    pub(crate) fn u1(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let s = self.mesh[0];
        let f = &self.gram_h * x;
        (0..self.mesh.len())
            .into_par_iter()
            .map(|i| {
                if i == 0 {
                    return x.clone();
                }
                let d = self.mesh[i] - s;
                match &self.frozen[i] {
                    Frozen::Spectral { z, lambda } => {
                        let mut c = z.tr_mul(&f);
                        for (k, mut row) in c.row_iter_mut().enumerate() {
                            row *= (-d * lambda[k]).exp();
                        }
                        z * c
                    }
                    Frozen::Contour(sg) => {
                        sg.apply_combination(std::slice::from_ref(&f), |l| vec![(-l * d).exp()])
                    }
                }
            })
            .collect()
    }

    /// `(P_s h)(τ_i)` at every node.
    pub(crate) fn apply(&self, h: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
        let m = self.mesh.len();
        let (n, c) = h[0].shape();
        let q: Vec<DMatrix<f64>> = (0..m).map(|j| &self.a[j] * &h[j]).collect();
        let mut stacked = DMatrix::<f64>::zeros(n, m * c);
        for (j, hj) in h.iter().enumerate() {
            stacked.columns_mut(j * c, c).copy_from(hj);
        }
        (0..m)
            .into_par_iter()
            .map(|i| {
                if i == 0 {
                    return DMatrix::zeros(n, c);
                }
                // g_j = (A_i - A_j) h_j for j < i; g_i = 0.
                let mut g = &self.a[i] * stacked.columns(0, i * c);
                for j in 0..i {
                    let mut blk = g.columns_mut(j * c, c);
                    blk -= &q[j];
                }
                match &self.frozen[i] {
                    Frozen::Spectral { z, lambda } => {
                        let gh = z.tr_mul(&g);
                        let mut w = DMatrix::<f64>::zeros(n, c);
                        let mut cw = vec![0.0; i + 1];
                        for l in 0..n {
                            product_weights(&self.mesh, &self.rules, i, lambda[l], &mut cw);
                            for j in 0..i {
                                if cw[j] == 0.0 {
                                    continue;
                                }
                                for col in 0..c {
                                    w[(l, col)] += cw[j] * gh[(l, j * c + col)];
                                }
                            }
                        }
                        z * w
                    }
                    Frozen::Contour(sg) => {
                        let blocks: Vec<DMatrix<f64>> =
                            (0..i).map(|j| g.columns(j * c, c).into_owned()).collect();
                        sg.apply_combination(&blocks, |l| {
                            let mut w = vec![C64::new(0.0, 0.0); i + 1];
                            product_weights(&self.mesh, &self.rules, i, l, &mut w);
                            w.truncate(i);
                            w
                        })
                    }
                }
            })
            .collect()
    }
}

fn sup_v(triple: &GelfandTriple, h: &[DMatrix<f64>]) -> f64 {
    h.iter()
        .map(|v| column_norm_max(triple.gram_v(), v))
        .fold(0.0, f64::max)
}

/// `A(t)` does not change over the horizon.
pub(crate) fn is_constant(form: &NonAutonomousForm) -> bool {
    if form.is_autonomous() {
        return true;
    }
    let a0 = form.at(0.0);
    uniform_times(form.horizon(), 17).iter().all(|&t| form.at(t) == a0)
}

/// Refuses forms whose fitted modulus exponent does not exceed `γ/2`.
pub fn dini_gate(form: &NonAutonomousForm) -> Result<()> {
    if is_constant(form) {
        return Ok(());
    }
    let grid = uniform_times(form.horizon(), 33);
    estimate_dini_modulus(form, &dyadic_lags(form.horizon(), 5), &grid)?.gate()
}

/// `e^{-(t-s)A(t)} x` for primal columns `x`.
pub fn u1_apply(form: &NonAutonomousForm, t: f64, s: f64, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if t < s {
        return Err(Error::Invalid(format!("need t >= s, got t = {t}, s = {s}")));
    }
    if t == s {
        return Ok(x.clone());
    }
    FrozenOperator::of_form(form, t)?.semigroup(t - s, x, CoordinateKind::Primal, SemigroupBackend::Auto)
}

/// `P_s h` on the mesh of `h`.
pub fn p_apply(form: &NonAutonomousForm, h: &Trajectory) -> Result<Trajectory> {
    dini_gate(form)?;
    let kernel = Kernel::new(form, h.times.clone(), SemigroupBackend::Auto)?;
    Ok(Trajectory {
        s: h.s,
        times: h.times.clone(),
        values: kernel.apply(&h.values),
        fallback_steps: 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftOptions {
    pub s: f64,
    pub probes: usize,
    pub seed: u64,
    pub mu_start: f64,
    pub mu_max: f64,
    /// Mesh for the probe estimate.
    pub mesh: MeshSpec,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        ShiftOptions {
            s: 0.0,
            probes: 64,
            seed: 7,
            mu_start: 1.0,
            mu_max: 65536.0,
            mesh: NeumannOptions::default().mesh,
        }
    }
}

/// `sup_τ ∫_s^τ ||e^{-(τ-r)A(τ)} (A(τ) - A(r))||_{L(V)} dr`, an upper bound
/// for `||P_s||` on `C(s, T; V)`. The inner integral runs over `ln(τ - r)`
/// with the part below the smallest lag fitted by a local power law.
pub fn kernel_norm_bound(form: &NonAutonomousForm, s: f64) -> Result<f64> {
    let horizon = form.horizon();
    let span = horizon - s;
    let mut taus: Vec<f64> = (0..11).map(|k| s + span / f64::powi(2.0, k)).collect();
    taus.extend((1..8).map(|k| s + span * k as f64 / 8.0));
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let triple = form.triple().clone();
    const LAGS: usize = 41;
    let per_tau: Vec<f64> = taus
        .par_iter()
        .map(|&tau| -> Result<f64> {
            let op = FrozenOperator::of_form(form, tau)?;
            let d = tau - s;
            let us: Vec<f64> = (0..LAGS)
                .map(|k| d * 10f64.powf(-8.0 * (LAGS - 1 - k) as f64 / (LAGS - 1) as f64))
                .collect();
            let a_tau = op.matrix();
            let mut f = Vec::with_capacity(LAGS);
            for &u in &us {
                let diff = a_tau - form.at(tau - u);
                let k = op.semigroup(u, &diff, CoordinateKind::Action, SemigroupBackend::Auto)?;
                f.push(triple.operator_norm(&k, Space::V, Space::V)?);
            }
            let mut total = 0.0;
            for k in 0..LAGS - 1 {
                let h = (us[k + 1] / us[k]).ln();
                total += 0.5 * h * (f[k] * us[k] + f[k + 1] * us[k + 1]);
            }
            if f[0] > 0.0 {
                let p = if f[1] > 0.0 {
                    (f[1] / f[0]).ln() / (us[1] / us[0]).ln()
                } else {
                    0.0
                };
                if p <= -1.0 {
                    return Ok(f64::INFINITY);
                }
                total += f[0] * us[0] / (p + 1.0);
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(per_tau.into_iter().fold(0.0, f64::max))
}

/// Largest `sup_V(P_s h)` over random piecewise-linear probes with `sup_V(h) = 1`.
pub fn probe_norm_estimate(
    form: &NonAutonomousForm,
    s: f64,
    probes: usize,
    seed: u64,
    mesh: &MeshSpec,
) -> Result<f64> {
    if probes == 0 {
        return Ok(0.0);
    }
    let nodes = mesh.build(form.horizon(), s, form.horizon(), &[], form.singular_times());
    let kernel = Kernel::new(form, nodes, SemigroupBackend::Auto)?;
    let triple = form.triple();
    let n = form.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    const KNOTS: usize = 5;
    let span = form.horizon() - s;
    let values: Vec<DMatrix<f64>> = (0..KNOTS)
        .map(|_| {
            let mut m = DMatrix::from_fn(n, probes, |_, _| rng.random_range(-1.0..1.0));
            for c in 0..probes {
                let col = m.column(c).into_owned();
                let norm = (col.dot(&(triple.gram_v() * &col))).sqrt();
                m.column_mut(c).scale_mut(1.0 / norm);
            }
            m
        })
        .collect();
    let h: Vec<DMatrix<f64>> = kernel
        .mesh()
        .iter()
        .map(|&t| {
            let x = ((t - s) / span * (KNOTS - 1) as f64).clamp(0.0, (KNOTS - 1) as f64);
            let k = (x.floor() as usize).min(KNOTS - 2);
            let w = x - k as f64;
            &values[k] * (1.0 - w) + &values[k + 1] * w
        })
        .collect();
    let out = kernel.apply(&h);
    let mut best: f64 = 0.0;
    for c in 0..probes {
        let num = out
            .iter()
            .map(|v| column_norm_max(triple.gram_v(), &v.columns(c, 1).into_owned()))
            .fold(0.0, f64::max);
        let den = h
            .iter()
            .map(|v| column_norm_max(triple.gram_v(), &v.columns(c, 1).into_owned()))
            .fold(0.0, f64::max);
        best = best.max(num / den);
    }
    Ok(best)
}

/// Kernel bound and probe estimate of `||P_s||` for `form` shifted by `mu`.
pub fn p_norm_estimate(form: &NonAutonomousForm, mu: f64, opts: &ShiftOptions) -> Result<(f64, f64)> {
    let shifted = form.shifted(mu);
    Ok((
        kernel_norm_bound(&shifted, opts.s)?,
        probe_norm_estimate(&shifted, opts.s, opts.probes, opts.seed, &opts.mesh)?,
    ))
}

/// A shifted form together with the evidence that its `P_s` is a contraction
/// of norm below 1/4.
#[derive(Debug, Clone)]
pub struct CertifiedForm {
    pub form: NonAutonomousForm,
    pub mu: f64,
    /// Upper bound for `||P_s||` (kernel norm).
    pub estimate: f64,
    /// Lower bound for `||P_s||` (random probes).
    pub probe_estimate: f64,
    /// `(μ, bound)` for every shift tried.
    pub history: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub mu: f64,
    pub estimate: f64,
    pub probe_estimate: f64,
    pub history: Vec<(f64, f64)>,
}

impl CertifiedForm {
    /// The form as is, without a certificate; usable by the stepper only.
    pub fn uncertified(form: NonAutonomousForm) -> Self {
        CertifiedForm {
            form,
            mu: 0.0,
            estimate: f64::NAN,
            probe_estimate: f64::NAN,
            history: Vec::new(),
        }
    }

    pub fn is_certified(&self) -> bool {
        self.estimate < CERTIFIED_NORM
    }

    pub fn summary(&self) -> CertificateSummary {
        CertificateSummary {
            mu: self.mu,
            estimate: self.estimate,
            probe_estimate: self.probe_estimate,
            history: self.history.clone(),
        }
    }
}

/// Doubles `μ` from `mu_start` until the kernel bound for `P_s` of the
/// shifted form drops below 1/4. Forms constant in time need no shift.
pub fn p_norm_and_shift(form: &NonAutonomousForm, opts: &ShiftOptions) -> Result<CertifiedForm> {
    dini_gate(form)?;
    if is_constant(form) {
        return Ok(CertifiedForm {
            form: form.clone(),
            mu: 0.0,
            estimate: 0.0,
            probe_estimate: 0.0,
            history: vec![(0.0, 0.0)],
        });
    }
    let mut mu = opts.mu_start;
    let mut history = Vec::new();
    loop {
        let shifted = form.shifted(mu);
        let bound = kernel_norm_bound(&shifted, opts.s)?;
        history.push((mu, bound));
        if bound < CERTIFIED_NORM {
            let probe =
                probe_norm_estimate(&shifted, opts.s, opts.probes, opts.seed, &opts.mesh)?;
            return Ok(CertifiedForm {
                form: shifted,
                mu,
                estimate: bound,
                probe_estimate: probe,
                history,
            });
        }
        mu *= 2.0;
        if mu > opts.mu_max {
            return Err(Error::ShiftDivergence { mu, estimate: bound });
        }
    }
}

#[derive(Debug, Clone)]
pub struct NeumannSolution {
    pub trajectory: Trajectory,
    /// Number of `P_s` applications.
    pub iterations: usize,
    /// `sup_V(h_{k+1}) / sup_V(h_k)`.
    pub ratios: Vec<f64>,
    /// Bound on the dropped terms, `sup_V(h_last) / 3`.
    pub tail_bound: f64,
    pub sup_h0: f64,
}

/// Sums the series from `u(s) = x` (primal columns) on the mesh built from
/// `opts.mesh`, containing every node of `required` in `[s, T]`.
pub fn neumann_solve(
    cert: &CertifiedForm,
    s: f64,
    x: &DMatrix<f64>,
    required: &[f64],
    opts: &NeumannOptions,
) -> Result<NeumannSolution> {
    if !cert.is_certified() {
        return Err(Error::NoCertifiedShift {
            estimate: cert.estimate,
        });
    }
    let form = &cert.form;
    let mesh = opts
        .mesh
        .build(form.horizon(), s, form.horizon(), required, form.singular_times());
    let kernel = Kernel::new(form, mesh, opts.backend)?;
    let triple = form.triple();
    let mut h = kernel.u1(x);
    let mut total = h.clone();
    let sup_h0 = sup_v(triple, &h);
    let mut ratios = Vec::new();
    let mut iterations = 0;
    let mut last = sup_h0;
    while sup_h0 > 0.0 {
            let next = kernel.apply(&h);
        iterations += 1;
        let sn = sup_v(triple, &next);
        ratios.push(if last > 0.0 { sn / last } else { 0.0 });
        for (t, v) in total.iter_mut().zip(&next) {
            *t += v;
        }
        last = sn;
        if sn <= opts.tol * (1.0 - CERTIFIED_NORM) * sup_h0 {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::Invalid(format!(
                "Neumann series did not reach tolerance after {iterations} terms"
            )));
        }
        h = next;
    }
    Ok(NeumannSolution {
        trajectory: Trajectory {
            s,
            times: kernel.mesh().to_vec(),
            values: total,
            fallback_steps: 0,
        },
        iterations,
        ratios,
        tail_bound: last / 3.0,
        sup_h0,
    })
}
