//! Quadrature for `e^{-τA}` along the two rays `{r e^{±iφ}}` around the
//! sector holding the spectrum.
//!
//! For real forms the lower ray is the conjugate of the upper one, so
//!
//! ```text
//! e^{-τA} F = -(1/π) ∫_0^∞ Im[ e^{iφ} e^{-τλ} (λ H - A)^{-1} F ] dr,   λ = r e^{iφ},
//! ```
//!
//! discretized by the trapezoid rule in `x = ln r`. The integrand is analytic
//! in a strip of half-width `min(φ - ψ, π/2 - φ)` around the real `x` axis,
//! which fixes the step for a requested accuracy.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, LU, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, C64};

/// Angle `φ` of the integration rays, the sector half-angle `ψ` they avoid,
/// and the geometric node ladder on each ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContourSpec {
    pub phi: f64,
    pub psi: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Maximal step in `ln r`.
    pub step: f64,
    /// Tail target for `e^{-τ r_max cos φ}`.
    pub target: f64,
    /// Extend `r_max` instead of failing when the tail misses the target.
    pub extend: bool,
}

/// Accuracy the default ladders are tuned for.
pub const DEFAULT_TARGET: f64 = 1e-13;

impl ContourSpec {
    /// Default ray between the sector and the imaginary axis.
    pub fn default_phi(psi: f64) -> f64 {
        psi + 0.6 * (FRAC_PI_2 - psi)
    }

    /// Ladder for durations `τ >= tau_min` of an operator whose spectrum lies
    /// in the sector of half-angle `psi` with real parts `>= floor`.
    pub fn auto(psi: f64, floor: f64, tau_min: f64, target: f64) -> Self {
        let phi = Self::default_phi(psi);
        let width = (phi - psi).min(FRAC_PI_2 - phi);
        let step = 2.0 * PI * width / (1.0 / target).ln();
        let r_max = (1.0 / target).ln() / (tau_min * phi.cos());
        ContourSpec {
            phi,
            psi,
            r_min: 1e-7 * floor,
            r_max,
            step,
            target,
            extend: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi > self.psi && self.phi < FRAC_PI_2) {
            return Err(Error::Invalid(format!(
                "ray angle {} must lie strictly between the sector angle {} and pi/2",
                self.phi, self.psi
            )));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(Error::Invalid("contour needs 0 < r_min < r_max".into()));
        }
        if self.node_count() < 8 {
            return Err(Error::Invalid("contour needs at least 8 nodes".into()));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        ((self.r_max / self.r_min).ln() / self.step).ceil() as usize + 1
    }

    /// Actual step after fitting the ladder to `[r_min, r_max]`.
    pub fn ladder_step(&self) -> f64 {
        (self.r_max / self.r_min).ln() / (self.node_count() - 1) as f64
    }

    pub fn radii(&self) -> Vec<f64> {
        let h = self.ladder_step();
        (0..self.node_count())
            .map(|k| self.r_min * (k as f64 * h).exp())
            .collect()
    }

    pub fn tail(&self, tau: f64) -> f64 {
        (-tau * self.r_max * self.phi.cos()).exp()
    }

    /// Checks the tail for the shortest duration, extending `r_max` if allowed.
    pub fn covering(&self, tau_min: f64) -> Result<Self> {
        self.validate()?;
        let mut spec = *self;
        if spec.tail(tau_min) > spec.target {
            if !spec.extend {
                return Err(Error::ContourTooShort {
                    tail: spec.tail(tau_min),
                    target: spec.target,
                });
            }
            spec.r_max = (1.0 / spec.target).ln() / (tau_min * spec.phi.cos());
        }
        Ok(spec)
    }
}

/// Factorized resolvents `(λ_k H - A)` at every node of one ladder.
pub struct ContourSemigroup {
    spec: ContourSpec,
    gram_h: DMatrix<f64>,
    nodes: Vec<C64>,
    weights: Vec<f64>,
    lus: Vec<LU<C64, Dyn, Dyn>>,
    /// `A^{-1}`, for the part of the ray below `r_min`.
    a_lu: LU<f64, Dyn, Dyn>,
}

/// Per-node solutions `X_k = (λ_k H - A)^{-1} F` for one right-hand side block.
pub struct NodeSolutions {
    solves: Vec<DMatrix<C64>>,
    /// `A^{-1} F`.
    head: DMatrix<f64>,
}

impl ContourSemigroup {
    pub fn new(a: &DMatrix<f64>, gram_h: &DMatrix<f64>, spec: ContourSpec) -> Result<Self> {
        spec.validate()?;
        let h = spec.ladder_step();
        let rot = C64::from_polar(1.0, spec.phi);
        let radii = spec.radii();
        let nodes: Vec<C64> = radii.iter().map(|&r| rot * r).collect();
        let weights: Vec<f64> = radii.iter().map(|&r| h * r).collect();
        let ac = linalg::to_complex(a);
        let hc = linalg::to_complex(gram_h);
        let lus: Vec<LU<C64, Dyn, Dyn>> = nodes
            .par_iter()
            .map(|&l| (&hc * l - &ac).lu())
            .collect();
        if let Some(k) = lus.iter().position(|lu| !lu.is_invertible()) {
            return Err(Error::SingularSystem {
                residual: nodes[k].norm(),
            });
        }
        let a_lu = a.clone().lu();
        if !a_lu.is_invertible() {
            return Err(Error::SingularSystem { residual: 0.0 });
        }
        Ok(ContourSemigroup {
            spec,
            gram_h: gram_h.clone(),
            nodes,
            weights,
            lus,
            a_lu,
        })
    }

    pub fn spec(&self) -> &ContourSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[C64] {
        &self.nodes
    }

    pub fn gram_h(&self) -> &DMatrix<f64> {
        &self.gram_h
    }

    pub fn solve(&self, f: &DMatrix<f64>) -> NodeSolutions {
        let fc = linalg::to_complex(f);
        let solves = self
            .lus
            .par_iter()
            .map(|lu| lu.solve(&fc).expect("factorization checked invertible"))
            .collect();
        let head = self.a_lu.solve(f).expect("factorization checked invertible");
        NodeSolutions { solves, head }
    }

    /// `Σ_k w_k (-1/π) Im[e^{iφ} g(λ_k) X_k] + g(0)·(head)`, for a scalar
    /// function `g` analytic on the rays. `g(λ) = e^{-τλ}` gives the semigroup.
    pub fn combine(&self, sol: &NodeSolutions, g: impl Fn(C64) -> C64, g0: f64) -> DMatrix<f64> {
        let rot = C64::from_polar(1.0, self.spec.phi);
        let (rows, cols) = sol.head.shape();
        let mut acc = DMatrix::<f64>::zeros(rows, cols);
        for k in 0..self.nodes.len() {
            let c = rot * g(self.nodes[k]) * (-self.weights[k] / PI);
            let x = &sol.solves[k];
            for (a, z) in acc.iter_mut().zip(x.iter()) {
                *a += c.re * z.im + c.im * z.re;
            }
        }
        // Geometric sum of the ladder continued below r_min, where
        // (λH - A)^{-1} ≈ -A^{-1}.
        let h = self.spec.ladder_step();
        let below = h * self.spec.r_min / h.exp_m1() * self.spec.phi.sin() / PI;
        acc + &sol.head * (below * g0)
    }

    pub fn apply(&self, sol: &NodeSolutions, tau: f64) -> DMatrix<f64> {
        self.combine(sol, |l| (-l * tau).exp(), 1.0)
    }

    /// `Σ_j c_j(A) G_j` for blocks `G_j` and scalar functions `c_j` given
    /// jointly by `coeffs(λ) = (c_0(λ), c_1(λ), …)`. Each node forms the
    /// combination first and solves once.
    pub fn apply_combination(
        &self,
        blocks: &[DMatrix<f64>],
        coeffs: impl Fn(C64) -> Vec<C64> + Sync,
    ) -> DMatrix<f64> {
        let (rows, cols) = blocks[0].shape();
        let rot = C64::from_polar(1.0, self.spec.phi);
        let parts: Vec<DMatrix<f64>> = (0..self.nodes.len())
            .into_par_iter()
            .map(|k| {
                let c = coeffs(self.nodes[k]);
                let mut g = DMatrix::<C64>::zeros(rows, cols);
                for (cj, b) in c.iter().zip(blocks) {
                    for (gz, &bv) in g.iter_mut().zip(b.iter()) {
                        *gz += cj * bv;
                    }
                }
                let x = self.lus[k].solve(&g).expect("factorization checked invertible");
                let w = rot * (-self.weights[k] / PI);
                x.map(|z| w.re * z.im + w.im * z.re)
            })
            .collect();
        let mut acc = DMatrix::<f64>::zeros(rows, cols);
        for p in parts {
            acc += p;
        }
        let c0 = coeffs(C64::new(0.0, 0.0));
        let mut g0 = DMatrix::<f64>::zeros(rows, cols);
        for (cj, b) in c0.iter().zip(blocks) {
            g0 += b * cj.re;
        }
        let h = self.spec.ladder_step();
        let below = h * self.spec.r_min / h.exp_m1() * self.spec.phi.sin() / PI;
        acc + self.a_lu.solve(&g0).expect("factorization checked invertible") * below
    }
}
