//! Time-dependent sesquilinear forms in coordinates, and estimators for the
//! constants they are assumed to satisfy: continuity `M`, coercivity `α`,
//! the sector angle `θ = π/2 − arctan(M/α)`, and the Dini modulus `ω`.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Pencil};
use crate::spaces::{GelfandTriple, Space};

pub type SamplerFn = dyn Fn(f64) -> DMatrix<f64> + Send + Sync;

/// `t ↦ A_form(t)` with `A_form(t)[i, j] = a(t; φ_j, φ_i)`, mapping primal
/// coefficients to action coordinates.
#[derive(Clone)]
pub struct NonAutonomousForm {
    triple: Arc<GelfandTriple>,
    horizon: f64,
    sampler: Arc<SamplerFn>,
    gamma: f64,
    shift: f64,
    autonomous: bool,
    singular_times: Vec<f64>,
}

impl fmt::Debug for NonAutonomousForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonAutonomousForm")
            .field("dim", &self.dim())
            .field("horizon", &self.horizon)
            .field("gamma", &self.gamma)
            .field("shift", &self.shift)
            .field("autonomous", &self.autonomous)
            .finish()
    }
}

impl NonAutonomousForm {
    pub fn new(
        triple: Arc<GelfandTriple>,
        horizon: f64,
        gamma: f64,
        sampler: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::GammaOutOfRange(gamma));
        }
        let a0 = sampler(0.0);
        if a0.nrows() != triple.dim() || a0.ncols() != triple.dim() {
            return Err(Error::DimensionMismatch {
                expected: triple.dim(),
                found: a0.nrows(),
            });
        }
        Ok(NonAutonomousForm {
            triple,
            horizon,
            sampler: Arc::new(sampler),
            gamma,
            shift: 0.0,
            autonomous: false,
            singular_times: Vec::new(),
        })
    }

    /// Time-independent form `a(t) ≡ a`.
    pub fn autonomous(
        triple: Arc<GelfandTriple>,
        horizon: f64,
        gamma: f64,
        a: DMatrix<f64>,
    ) -> Result<Self> {
        let mut form = Self::new(triple, horizon, gamma, move |_| a.clone())?;
        form.autonomous = true;
        Ok(form)
    }

    /// Times where the coefficients are only Hölder; quadrature meshes grade toward them.
    pub fn with_singular_times(mut self, times: Vec<f64>) -> Self {
        self.singular_times = times;
        self
    }

    pub fn triple(&self) -> &Arc<GelfandTriple> {
        &self.triple
    }

    pub fn dim(&self) -> usize {
        self.triple.dim()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    pub fn is_autonomous(&self) -> bool {
        self.autonomous
    }

    pub fn singular_times(&self) -> &[f64] {
        &self.singular_times
    }

    /// `A_form(t) + μ gram_H` for the accumulated shift `μ`.
    pub fn at(&self, t: f64) -> DMatrix<f64> {
        let a = (self.sampler)(t);
        if self.shift == 0.0 {
            a
        } else {
            a + self.triple.gram_h() * self.shift
        }
    }

    /// The form `a(t) + μ (·|·)_H`.
    pub fn shifted(&self, mu: f64) -> Self {
        let mut out = self.clone();
        out.shift += mu;
        out
    }

    /// Symmetric at the start, middle and end of the horizon.
    pub fn is_symmetric(&self) -> bool {
        [0.0, 0.5 * self.horizon, self.horizon]
            .iter()
            .all(|&t| linalg::is_symmetric(&self.at(t), 1e-12))
    }
}

/// Uniform grid with `count` nodes on `[0, T]`.
pub fn uniform_times(horizon: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count)
        .map(|i| horizon * i as f64 / (count - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FormBounds {
    #[serde(rename = "M")]
    pub m: f64,
    pub alpha: f64,
    pub theta: f64,
}

impl FormBounds {
    /// Half-angle `arctan(M/α)` of the sector holding the numerical range.
    pub fn spectral_half_angle(&self) -> f64 {
        FRAC_PI_2 - self.theta
    }
}

fn check_grid(form: &NonAutonomousForm, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let tol = 1e-12 * form.horizon.max(1.0);
    if let Some(t) = grid.iter().find(|&&t| t < -tol || t > form.horizon + tol) {
        return Err(Error::Invalid(format!("grid time {t} outside [0, T]")));
    }
    Ok(())
}

/// Continuity/coercivity constants of one frozen operator.
pub fn frozen_bounds(triple: &GelfandTriple, a: &DMatrix<f64>) -> Result<FormBounds> {
    let m = triple.operator_norm(a, Space::V, Space::VDual)?;
    let alpha = Pencil::new(&linalg::sym_part(a), triple.chol_v()).values[0];
    Ok(FormBounds {
        m,
        alpha,
        theta: FRAC_PI_2 - m.atan2(alpha),
    })
}

/// `M̂`, `α̂` and `θ̂` over the sampled times. `α̂ <= 0` is reported, not rejected.
pub fn estimate_bounds(form: &NonAutonomousForm, grid: &[f64]) -> Result<FormBounds> {
    check_grid(form, grid)?;
    let per_time: Vec<FormBounds> = grid
        .par_iter()
        .map(|&t| frozen_bounds(form.triple(), &form.at(t)))
        .collect::<Result<_>>()?;
    let m = per_time.iter().map(|b| b.m).fold(0.0, f64::max);
    let alpha = per_time.iter().map(|b| b.alpha).fold(f64::INFINITY, f64::min);
    Ok(FormBounds {
        m,
        alpha,
        theta: FRAC_PI_2 - m.atan2(alpha),
    })
}

/// Smallest eigenvalue of the Hermitian part in the H-pencil, over the grid.
pub fn min_h_eigenvalue(form: &NonAutonomousForm, grid: &[f64]) -> Result<f64> {
    check_grid(form, grid)?;
    Ok(grid
        .par_iter()
        .map(|&t| Pencil::new(&linalg::sym_part(&form.at(t)), form.triple().chol_h()).values[0])
        .collect::<Vec<_>>()
        .into_iter()
        .fold(f64::INFINITY, f64::min))
}

/// Shift restoring coercivity when `α̂ <= 0`: `max(0, −2 λ_min) + 1`, else 0.
pub fn coercivity_shift(form: &NonAutonomousForm, grid: &[f64]) -> Result<f64> {
    let bounds = estimate_bounds(form, grid)?;
    if bounds.alpha > 0.0 {
        return Ok(0.0);
    }
    let lmin = min_h_eigenvalue(form, grid)?;
    Ok((-2.0 * lmin).max(0.0) + 1.0)
}

/// Sampled modulus of continuity of `t ↦ A_form(t)` in `L(V, V'_γ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiniModulus {
    pub lags: Vec<f64>,
    pub values: Vec<f64>,
    pub gamma: f64,
    pub horizon: f64,
    /// Power-law fit `ω̂(δ) ≈ C δ^q`; `q = ∞` for a vanishing modulus.
    pub fit_c: f64,
    pub fit_q: f64,
    /// Estimate of `sup ω(t)/t^{γ/2}`.
    pub sup_ratio: f64,
    /// Estimate of `∫_0^T ω(t)/t^{1+γ/2} dt` (up to the largest lag).
    pub dini_integral: f64,
}

const ZERO_MODULUS: f64 = 1e-300;

impl DiniModulus {
    pub fn from_samples(lags: Vec<f64>, values: Vec<f64>, gamma: f64, horizon: f64) -> Result<Self> {
        if lags.is_empty() || lags.len() != values.len() {
            return Err(Error::InsufficientGrid("no lag samples".into()));
        }
        if lags.windows(2).any(|w| w[1] <= w[0]) || lags[0] <= 0.0 {
            return Err(Error::Invalid("lags must be positive and increasing".into()));
        }
        let mut m = DiniModulus {
            lags,
            values,
            gamma,
            horizon,
            fit_c: 0.0,
            fit_q: f64::INFINITY,
            sup_ratio: 0.0,
            dini_integral: 0.0,
        };
        m.fit();
        m.sup_ratio = m.compute_sup_ratio();
        m.dini_integral = m.head_integral(m.lags.len() - 1, 1.0);
        Ok(m)
    }

    fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v <= ZERO_MODULUS)
    }

    fn fit(&mut self) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = self
            .lags
            .iter()
            .zip(&self.values)
            .filter(|(_, &v)| v > ZERO_MODULUS)
            .map(|(&d, &v)| (d.ln(), v.ln()))
            .unzip();
        match xs.len() {
            0 => {
                self.fit_c = 0.0;
                self.fit_q = f64::INFINITY;
            }
            1 => {
                // A single sample cannot fix an exponent; assume Lipschitz.
                self.fit_q = 1.0;
                self.fit_c = ys[0].exp() / xs[0].exp();
            }
            _ => {
                let (a, b) = linalg::fit_line(&xs, &ys);
                self.fit_c = a.exp();
                self.fit_q = b;
            }
        }
    }

    /// `γ/2`, the exponent the fit has to beat.
    pub fn threshold(&self) -> f64 {
        0.5 * self.gamma
    }

    fn compute_sup_ratio(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        if self.fit_q < self.threshold() {
            return f64::INFINITY;
        }
        self.lags
            .iter()
            .zip(&self.values)
            .map(|(d, v)| v / d.powf(self.threshold()))
            .fold(0.0, f64::max)
    }

    /// `∫_0^{lags[k]} ω(t)^power / t^{1 + power·γ/2} dt`: the power-law fit
    /// below the smallest lag, log-trapezoid over the samples above it.
    fn head_integral(&self, k: usize, power: f64) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let g = power * self.threshold();
        let q = power * self.fit_q;
        if q <= g {
            return f64::INFINITY;
        }
        let c = self.fit_c.powf(power);
        let d1 = self.lags[0];
        let mut total = c * d1.powf(q - g) / (q - g);
        let f = |i: usize| self.values[i].powf(power) / self.lags[i].powf(g);
        for i in 0..k {
            let h = (self.lags[i + 1] / self.lags[i]).ln();
            total += 0.5 * h * (f(i) + f(i + 1));
        }
        total
    }

    /// `∫_0^T ω(t)²/t^{1+γ} dt`.
    pub fn square_integral(&self) -> f64 {
        self.head_integral(self.lags.len() - 1, 2.0)
    }

    /// Largest `δ₀` with `∫_0^{δ₀} ω(t)/t^{1+γ/2} dt < ε`: the largest sampled lag
    /// when one qualifies, otherwise the inverse of the power-law head.
    /// A vanishing modulus imposes no restriction and reports 0.
    pub fn delta0_for(&self, eps: f64) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let g = self.threshold();
        if self.fit_q <= g {
            return 0.0;
        }
        if let Some(k) = (0..self.lags.len()).rev().find(|&k| self.head_integral(k, 1.0) < eps) {
            return self.lags[k];
        }
        let e = self.fit_q - g;
        (eps * e / self.fit_c).powf(1.0 / e)
    }

    /// `ω̂(δ)`: the sample at a matching lag, else the power-law fit.
    pub fn omega_at(&self, delta: f64) -> f64 {
        if let Some(i) = self
            .lags
            .iter()
            .position(|&l| (l - delta).abs() <= 1e-9 * l.max(1e-300))
        {
            return self.values[i];
        }
        if self.is_zero() {
            0.0
        } else {
            self.fit_c * delta.powf(self.fit_q)
        }
    }

    /// Refuses forms whose fitted exponent does not exceed `γ/2`.
    pub fn gate(&self) -> Result<()> {
        if self.fit_q > self.threshold() {
            Ok(())
        } else {
            Err(Error::DiniViolated {
                q: self.fit_q,
                threshold: self.threshold(),
            })
        }
    }
}

/// `ω̂(δ) = max_{|t−s| = δ} ||A_form(t) − A_form(s)||_{L(V, V'_γ)}` over grid pairs.
pub fn estimate_dini_modulus(
    form: &NonAutonomousForm,
    lags: &[f64],
    grid: &[f64],
) -> Result<DiniModulus> {
    check_grid(form, grid)?;
    if lags.is_empty() {
        return Err(Error::InsufficientGrid("no lags requested".into()));
    }
    let mut lags = lags.to_vec();
    lags.sort_by(f64::total_cmp);
    lags.dedup();
    if lags[0] <= 0.0 || *lags.last().unwrap() > form.horizon() * (1.0 + 1e-12) {
        return Err(Error::InsufficientGrid("lags must lie in (0, T]".into()));
    }
    let samples: Vec<DMatrix<f64>> = grid.par_iter().map(|&t| form.at(t)).collect();
    let tol = 1e-9 * form.horizon().max(1.0);
    let gamma = form.gamma();
    let triple = form.triple();
    let values = lags
        .iter()
        .map(|&delta| {
            let pairs: Vec<(usize, usize)> = (0..grid.len())
                .flat_map(|i| (0..grid.len()).map(move |j| (i, j)))
                .filter(|&(i, j)| (grid[i] - grid[j] - delta).abs() <= tol)
                .collect();
            if pairs.is_empty() {
                return Err(Error::InsufficientGrid(format!("no grid pair at lag {delta}")));
            }
            let norms = pairs
                .par_iter()
                .map(|&(i, j)| {
                    triple.operator_norm(
                        &(&samples[i] - &samples[j]),
                        Space::V,
                        Space::VGammaDual(gamma),
                    )
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(norms.into_iter().fold(0.0, f64::max))
        })
        .collect::<Result<Vec<f64>>>()?;
    DiniModulus::from_samples(lags, values, gamma, form.horizon())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiniReport {
    pub q: f64,
    pub threshold: f64,
    pub sup_finite: bool,
    pub integral_finite: bool,
    pub sup_ratio: f64,
    pub dini_integral: f64,
    pub square_integral: f64,
    /// `(ε, δ₀)` pairs.
    pub delta0_table: Vec<(f64, f64)>,
}

pub const DEFAULT_EPSILONS: [f64; 4] = [1.0, 1e-1, 1e-2, 1e-3];

pub fn verify_dini(modulus: &DiniModulus, epsilons: &[f64]) -> DiniReport {
    let finite = modulus.is_zero() || modulus.fit_q > modulus.threshold();
    DiniReport {
        q: modulus.fit_q,
        threshold: modulus.threshold(),
        sup_finite: finite,
        integral_finite: finite,
        sup_ratio: modulus.sup_ratio,
        dini_integral: modulus.dini_integral,
        square_integral: modulus.square_integral(),
        delta0_table: epsilons.iter().map(|&e| (e, modulus.delta0_for(e))).collect(),
    }
}

/// Geometric lags `T·2^{-k}`, `k = levels-1, …, 0`.
pub fn dyadic_lags(horizon: f64, levels: usize) -> Vec<f64> {
    (0..levels)
        .rev()
        .map(|k| horizon / f64::powi(2.0, k as i32))
        .collect()
}
