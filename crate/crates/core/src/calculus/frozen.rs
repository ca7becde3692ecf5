//! The operator `A(t)` at one frozen time: resolvent, semigroup, fractional powers.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::contour::{ContourSemigroup, ContourSpec, DEFAULT_TARGET};
use crate::error::{Error, Result};
use crate::form::NonAutonomousForm;
use crate::linalg::{self, Pencil, C64};
use crate::spaces::{CoordinateKind, GelfandTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemigroupBackend {
    /// Eigendecomposition for symmetric operators, contour otherwise.
    #[default]
    Auto,
    Contour,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FracMethod {
    /// Eigendecomposition for symmetric operators, semigroup integral otherwise.
    #[default]
    Auto,
    /// `(2/√π) ∫_0^∞ e^{-σ²B} dσ` through the contour semigroup.
    Integral,
    /// `(1/π) ∫_0^∞ t^{-1/2} (t + B)^{-1} dt`.
    Resolvent,
    Spectral,
}

/// `A(t)` with the geometry needed by the calculus. Matrices map primal
/// coefficients to action coordinates.
#[derive(Debug, Clone)]
pub struct FrozenOperator {
    triple: Arc<GelfandTriple>,
    a: DMatrix<f64>,
    symmetric: bool,
    /// Half-angle of the numerical range of `A` in the H geometry.
    psi: f64,
    /// Smallest real part of the numerical range in the H geometry.
    floor: f64,
    /// Eigenpairs of the pencil `(A, H)` when `A` is symmetric.
    spectral: Option<Pencil>,
}

impl FrozenOperator {
    pub fn new(triple: Arc<GelfandTriple>, a: DMatrix<f64>) -> Result<Self> {
        if a.shape() != (triple.dim(), triple.dim()) {
            return Err(Error::DimensionMismatch {
                expected: triple.dim(),
                found: a.nrows(),
            });
        }
        let l = triple.chol_h().l();
        let x = l.solve_lower_triangular(&a).expect("cholesky factor is nonsingular");
        let c = l
            .solve_lower_triangular(&x.transpose())
            .expect("cholesky factor is nonsingular")
            .transpose();
        let sym = linalg::sym_part(&c);
        let (values, vectors) = linalg::sym_eigen(&sym);
        let floor = values[0];
        let symmetric = linalg::is_symmetric(&a, 1e-12);
        let psi = if symmetric || floor <= 0.0 {
            0.0
        } else {
            // tan ψ = ||S^{-1/2} K S^{-1/2}|| for C = S + K.
            let skew = (&c - c.transpose()) * 0.5;
            let s_inv_half = &vectors
                * DMatrix::from_diagonal(&values.map(|v| 1.0 / v.sqrt()))
                * vectors.transpose();
            linalg::sigma_max(&(&s_inv_half * skew * &s_inv_half)).atan()
        };
        let spectral = symmetric.then(|| Pencil::new(&a, triple.chol_h()));
        Ok(FrozenOperator {
            triple,
            a,
            symmetric,
            psi,
            floor,
            spectral,
        })
    }

    pub fn of_form(form: &NonAutonomousForm, t: f64) -> Result<Self> {
        Self::new(form.triple().clone(), form.at(t))
    }

    pub fn triple(&self) -> &Arc<GelfandTriple> {
        &self.triple
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn sector_angle(&self) -> f64 {
        self.psi
    }

    pub fn h_floor(&self) -> f64 {
        self.floor
    }

    fn require_coercive(&self) -> Result<()> {
        if self.floor > 0.0 {
            Ok(())
        } else {
            Err(Error::NotCoercive { alpha: self.floor })
        }
    }

    /// Eigenpairs `A Z = H Z Λ`, `Z^T H Z = I`, of a symmetric operator.
    pub fn eigen(&self) -> Option<&Pencil> {
        self.spectral.as_ref()
    }

    /// `(λ H - A)^{-1} F`, i.e. `(λ - 𝒜)^{-1}` on action coordinates.
    pub fn resolvent(&self, lambda: C64, f: &DMatrix<f64>) -> Result<DMatrix<C64>> {
        if lambda.norm() > 0.0 && lambda.arg().abs() <= self.psi && self.floor > 0.0 {
            return Err(Error::LambdaInSector {
                re: lambda.re,
                im: lambda.im,
                half_angle: self.psi,
            });
        }
        let m = linalg::to_complex(self.triple.gram_h()) * lambda - linalg::to_complex(&self.a);
        let fc = linalg::to_complex(f);
        let lu = m.clone().lu();
        let u = lu.solve(&fc).ok_or(Error::SingularSystem {
            residual: f64::INFINITY,
        })?;
        let residual = (&m * &u - &fc).norm() / fc.norm().max(f64::MIN_POSITIVE);
        if !residual.is_finite() || residual > 1e-6 {
            return Err(Error::SingularSystem { residual });
        }
        Ok(u)
    }

    /// Default contour for durations `>= tau_min`.
    pub fn contour(&self, tau_min: f64) -> Result<ContourSpec> {
        self.require_coercive()?;
        Ok(ContourSpec::auto(self.psi, self.floor, tau_min, DEFAULT_TARGET))
    }

    pub fn contour_semigroup(&self, spec: &ContourSpec) -> Result<ContourSemigroup> {
        self.require_coercive()?;
        ContourSemigroup::new(&self.a, self.triple.gram_h(), *spec)
    }

    fn use_spectral(&self, backend: SemigroupBackend) -> Result<bool> {
        match backend {
            SemigroupBackend::Auto => Ok(self.symmetric),
            SemigroupBackend::Contour => Ok(false),
            SemigroupBackend::Spectral if self.symmetric => Ok(true),
            SemigroupBackend::Spectral => Err(Error::Invalid(
                "spectral backend needs a symmetric operator".into(),
            )),
        }
    }

    /// `e^{-τ𝒜} F` for action columns `F`, returned in primal coordinates.
    pub fn semigroup_action(
        &self,
        taus: &[f64],
        f: &DMatrix<f64>,
        backend: SemigroupBackend,
    ) -> Result<Vec<DMatrix<f64>>> {
        if taus.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Invalid("semigroup durations must be positive".into()));
        }
        if self.use_spectral(backend)? {
            let p = self.spectral.as_ref().expect("symmetric");
            let zf = p.vectors.tr_mul(f);
            return Ok(taus
                .iter()
                .map(|&tau| {
                    let d = p.values.map(|l| (-tau * l).exp());
                    &p.vectors * DMatrix::from_diagonal(&d) * &zf
                })
                .collect());
        }
        let tau_min = taus.iter().copied().fold(f64::INFINITY, f64::min);
        let spec = self.contour(tau_min)?;
        let sg = self.contour_semigroup(&spec)?;
        let sol = sg.solve(f);
        Ok(taus.iter().map(|&tau| sg.apply(&sol, tau)).collect())
    }

    /// `e^{-τA}` applied to a block of vectors of either kind; primal result.
    pub fn semigroup(
        &self,
        tau: f64,
        x: &DMatrix<f64>,
        kind: CoordinateKind,
        backend: SemigroupBackend,
    ) -> Result<DMatrix<f64>> {
        let f = match kind {
            CoordinateKind::Primal => self.triple.to_action(x),
            CoordinateKind::Action => x.clone(),
        };
        Ok(self.semigroup_action(&[tau], &f, backend)?.remove(0))
    }

    /// `𝒜^{-1/2} F` for action columns, primal result.
    pub fn inv_sqrt(&self, f: &DMatrix<f64>, method: FracMethod) -> Result<DMatrix<f64>> {
        self.require_coercive()?;
        match method {
            FracMethod::Auto if self.symmetric => self.inv_sqrt_spectral(f),
            FracMethod::Spectral => {
                if !self.symmetric {
                    return Err(Error::Invalid(
                        "spectral square root needs a symmetric operator".into(),
                    ));
                }
                self.inv_sqrt_spectral(f)
            }
            FracMethod::Auto | FracMethod::Integral => self.inv_sqrt_integral(f),
            FracMethod::Resolvent => Ok(self.inv_sqrt_resolvent(f)),
        }
    }

    /// `A^{1/2} u = 𝒜^{-1/2}(A u)` for primal columns `u`.
    pub fn sqrt(&self, u: &DMatrix<f64>, method: FracMethod) -> Result<DMatrix<f64>> {
        self.inv_sqrt(&(&self.a * u), method)
    }

    fn inv_sqrt_spectral(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.spectral.as_ref().expect("symmetric");
        let d = p.values.map(|l| 1.0 / l.sqrt());
        Ok(&p.vectors * DMatrix::from_diagonal(&d) * p.vectors.tr_mul(f))
    }

    /// Largest real part of the spectrum, bounded by the H-geometry norm.
    fn top(&self) -> f64 {
        let l = self.triple.chol_h().l();
        let x = l.solve_lower_triangular(&self.a).expect("nonsingular");
        let c = l
            .solve_lower_triangular(&x.transpose())
            .expect("nonsingular");
        linalg::sigma_max(&c)
    }

    /// `(2/√π) ∫_0^∞ e^{-σ²B} F dσ` on a geometric σ-ladder. Every ladder
    /// term reuses the same contour solves, so the σ-sum collapses to a
    /// scalar weight per contour node.
    fn inv_sqrt_integral(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let target = DEFAULT_TARGET;
        let sigma_min = 1e-6 / self.top().sqrt();
        let sigma_max = ((1.0 / target).ln() / self.floor).sqrt();
        let spec = ContourSpec::auto(self.psi, self.floor, sigma_min * sigma_min, target);
        // e^{-σ²λ} at contour nodes: analytic for |arg| < (π/2 - φ)/2 in ln σ.
        let width = 0.5 * (std::f64::consts::FRAC_PI_2 - spec.phi);
        let h_max = 2.0 * std::f64::consts::PI * width / (1.0 / target).ln();
        let count = ((sigma_max / sigma_min).ln() / h_max).ceil() as usize + 1;
        let h = (sigma_max / sigma_min).ln() / (count - 1) as f64;
        let sigmas: Vec<f64> = (0..count).map(|j| sigma_min * (j as f64 * h).exp()).collect();
        let sg = self.contour_semigroup(&spec)?;
        let sol = sg.solve(f);
        let scale = 2.0 / std::f64::consts::PI.sqrt();
        let weight_sum: f64 = sigmas.iter().map(|s| h * s).sum();
        let g = |l: C64| -> C64 {
            sigmas
                .iter()
                .map(|&s| (-l * (s * s)).exp() * (h * s))
                .sum::<C64>()
                * scale
        };
        let body = sg.combine(&sol, g, weight_sum * scale);
        // Ladder continued below σ_min, where e^{-σ²B} ≈ I.
        let below = h * sigma_min / h.exp_m1() * scale;
        Ok(body + self.triple.to_primal(f) * below)
    }

    /// `(1/π) ∫_0^∞ t^{-1/2} (t H + A)^{-1} F dt` in `t = e^x`, with the
    /// asymptotic pieces below `t_0` and above `t_1` added in closed form.
    fn inv_sqrt_resolvent(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        let lo = self.floor;
        let hi = self.top();
        let t0 = 1e-14 * lo;
        let t1 = 1e14 * hi;
        let h_max = 0.4;
        let count = ((t1 / t0).ln() / h_max).ceil() as usize + 1;
        let h = (t1 / t0).ln() / (count - 1) as f64;
        let gram_h = self.triple.gram_h();
        let terms: Vec<DMatrix<f64>> = {
            use rayon::prelude::*;
            (0..count)
                .into_par_iter()
                .map(|k| {
                    let t = t0 * (k as f64 * h).exp();
                    let w = if k == 0 || k == count - 1 { 0.5 * h } else { h };
                    let m = gram_h * t + &self.a;
                    m.lu().solve(f).expect("coercive shift is invertible") * (w * t.sqrt())
                })
                .collect()
        };
        let mut acc = DMatrix::zeros(f.nrows(), f.ncols());
        for t in terms {
            acc += t;
        }
        let a_inv_f = self.a.clone().lu().solve(f).expect("coercive operator is invertible");
        let head = a_inv_f * (2.0 * t0.sqrt());
        let tail = self.triple.to_primal(f) * (2.0 / t1.sqrt());
        (acc + head + tail) / std::f64::consts::PI
    }
}

/// `(λ - 𝒜(t))^{-1} F` for one action vector.
pub fn resolvent_apply(
    form: &NonAutonomousForm,
    t: f64,
    lambda: C64,
    f: &DVector<f64>,
) -> Result<DVector<C64>> {
    let op = FrozenOperator::of_form(form, t)?;
    let u = op.resolvent(lambda, &DMatrix::from_column_slice(f.len(), 1, f.as_slice()))?;
    Ok(u.column(0).into_owned())
}

/// `e^{-τA(t)} x` by contour quadrature; `x` of either kind, primal result.
pub fn semigroup_apply(
    form: &NonAutonomousForm,
    t: f64,
    tau: f64,
    x: &DVector<f64>,
    kind: CoordinateKind,
    contour: Option<&ContourSpec>,
) -> Result<DVector<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid("semigroup duration must be positive".into()));
    }
    let op = FrozenOperator::of_form(form, t)?;
    let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let f = match kind {
        CoordinateKind::Primal => op.triple().to_action(&xm),
        CoordinateKind::Action => xm,
    };
    let spec = match contour {
        Some(c) => c.covering(tau)?,
        None => op.contour(tau)?,
    };
    let sg = op.contour_semigroup(&spec)?;
    let sol = sg.solve(&f);
    Ok(sg.apply(&sol, tau).column(0).into_owned())
}

/// `𝒜(t)^{-1/2} F` for an action vector, primal result.
pub fn inv_sqrt_apply(
    form: &NonAutonomousForm,
    t: f64,
    f: &DVector<f64>,
    method: FracMethod,
) -> Result<DVector<f64>> {
    let op = FrozenOperator::of_form(form, t)?;
    let r = op.inv_sqrt(&DMatrix::from_column_slice(f.len(), 1, f.as_slice()), method)?;
    Ok(r.column(0).into_owned())
}

/// `A(t)^{1/2} u` for a primal vector.
pub fn sqrt_apply(
    form: &NonAutonomousForm,
    t: f64,
    u: &DVector<f64>,
    method: FracMethod,
) -> Result<DVector<f64>> {
    let op = FrozenOperator::of_form(form, t)?;
    let r = op.sqrt(&DMatrix::from_column_slice(u.len(), 1, u.as_slice()), method)?;
    Ok(r.column(0).into_owned())
}
