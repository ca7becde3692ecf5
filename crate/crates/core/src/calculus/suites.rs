//! Empirical constants for the frozen-time resolvent and semigroup estimates
//! and for the square-root bounds.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::frozen::{FracMethod, FrozenOperator, SemigroupBackend};
use crate::error::{Error, Result};
use crate::form::{DiniModulus, NonAutonomousForm};
use crate::linalg::{self, C64};
use crate::report::{fmt_num, Csv};
use crate::spaces::Space;

/// Spectral parameters, durations and frozen times the suite runs over.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuitePlan {
    pub lambdas: Vec<(f64, f64)>,
    pub durations: Vec<f64>,
    pub times: Vec<f64>,
}

fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let count = count.max(2);
    (0..count)
        .map(|k| lo * (hi / lo).powf(k as f64 / (count - 1) as f64))
        .collect()
}

impl SuitePlan {
    /// Rays at angles `ψ + (π - ψ)/4` and `π`, `|λ| ∈ [1e-2, 1e4]`,
    /// durations in `[1e-3, T]`; `refine` multiplies every sample count.
    pub fn standard(psi: f64, horizon: f64, refine: usize) -> Self {
        let refine = refine.max(1);
        let mags = log_space(1e-2, 1e4, 24 * refine);
        let mut lambdas = Vec::new();
        for angle in [psi + 0.25 * (PI - psi), PI] {
            for &m in &mags {
                let z = C64::from_polar(m, angle);
                lambdas.push((z.re, z.im));
            }
        }
        SuitePlan {
            lambdas,
            durations: log_space(1e-3, horizon, 24 * refine),
            times: vec![0.0, 0.5 * horizon, horizon],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteItem {
    pub id: usize,
    pub label: String,
    pub constant: f64,
    /// Sample attaining the sup: `λ = (re, im)` or `(s, 0)`, and the frozen time.
    pub argmax: (f64, f64),
    pub at_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSuiteReport {
    pub items: Vec<SuiteItem>,
    pub lambda_count: usize,
    pub duration_count: usize,
    /// `sup_t ||𝒜(t)^{-1/2}||_{L(V', H)}`.
    pub kappa: f64,
    /// `sup_t ||A(t)^{-1/2}||_{L(V)}`.
    pub c0: f64,
}

impl EstimateSuiteReport {
    pub fn all_finite(&self) -> bool {
        self.items.iter().all(|i| i.constant.is_finite())
            && self.kappa.is_finite()
            && self.c0.is_finite()
    }

    pub fn constants(&self) -> Vec<f64> {
        self.items.iter().map(|i| i.constant).collect()
    }

    pub fn to_csv(&self) -> Csv {
        let mut csv = Csv::new(&[
            "item",
            "estimate",
            "sup_constant",
            "argmax_re_or_s",
            "argmax_im",
            "frozen_t",
        ]);
        for it in &self.items {
            csv.push(vec![
                it.id.to_string(),
                it.label.clone(),
                fmt_num(it.constant),
                fmt_num(it.argmax.0),
                fmt_num(it.argmax.1),
                fmt_num(it.at_time),
            ]);
        }
        csv
    }
}

const LABELS: [&str; 11] = [
    "(1+|l|)^(1-g/2) |R|_{V'_g->H}",
    "(1+|l|) |R|_{V->V}",
    "(1+|l|)^(1/2) |R|_{H->V}",
    "(1+|l|)^(1/2) |R|_{V'->H}",
    "|R|_{V'->V}",
    "(1+|l|)^((1-g)/2) |R|_{V'_g->V}",
    "s |e^{-sB}|_{V'->V}",
    "s^(g/2) |e^{-sB}|_{V'_g->H}",
    "s^((1+g)/2) |e^{-sB}|_{V'_g->V}",
    "s |B e^{-sB}|_{H->H}",
    "|e^{-sB}|_{V->V}",
];

#[derive(Clone, Copy)]
struct Best {
    value: f64,
    arg: (f64, f64),
    t: f64,
}

impl Best {
    fn none() -> Self {
        Best {
            value: f64::NEG_INFINITY,
            arg: (0.0, 0.0),
            t: 0.0,
        }
    }

    fn offer(&mut self, value: f64, arg: (f64, f64), t: f64) {
        // A NaN sample poisons the constant.
        if self.value.is_nan() {
            return;
        }
        if value.is_nan() || value > self.value {
            *self = Best { value, arg, t };
        }
    }
}

/// Sup constants of the eleven frozen-time estimates over the plan.
pub fn resolvent_estimate_suite(
    form: &NonAutonomousForm,
    plan: &SuitePlan,
) -> Result<EstimateSuiteReport> {
    if plan.times.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let gamma = form.gamma();
    let n = form.dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let per_time: Vec<(Vec<Best>, f64, f64)> = plan
        .times
        .par_iter()
        .map(|&t| -> Result<(Vec<Best>, f64, f64)> {
            let op = FrozenOperator::of_form(form, t)?;
            let triple = op.triple().clone();
            let gram_h: DMatrix<C64> = linalg::lift(triple.gram_h());
            let mut best = vec![Best::none(); 11];
            let lam_rows: Vec<[f64; 6]> = plan
                .lambdas
                .par_iter()
                .map(|&(re, im)| -> Result<[f64; 6]> {
                    let l = C64::new(re, im);
                    let r = op.resolvent(l, &eye)?;
                    let rh = &r * &gram_h;
                    let g = 1.0 + l.norm();
                    Ok([
                        g.powf(1.0 - 0.5 * gamma)
                            * triple.operator_norm(&r, Space::VGammaDual(gamma), Space::H)?,
                        g * triple.operator_norm(&rh, Space::V, Space::V)?,
                        g.sqrt() * triple.operator_norm(&rh, Space::H, Space::V)?,
                        g.sqrt() * triple.operator_norm(&r, Space::VDual, Space::H)?,
                        triple.operator_norm(&r, Space::VDual, Space::V)?,
                        g.powf(0.5 * (1.0 - gamma))
                            * triple.operator_norm(&r, Space::VGammaDual(gamma), Space::V)?,
                    ])
                })
                .collect::<Result<_>>()?;
            for (row, &lam) in lam_rows.iter().zip(&plan.lambdas) {
                for (k, &v) in row.iter().enumerate() {
                    best[k].offer(v, lam, t);
                }
            }
            let semis = op.semigroup_action(&plan.durations, &eye, SemigroupBackend::Auto)?;
            let a_over_h = triple.to_primal(op.matrix());
            let s_rows: Vec<[f64; 5]> = semis
                .par_iter()
                .zip(plan.durations.par_iter())
                .map(|(sa, &s)| -> Result<[f64; 5]> {
                    let sp = sa * triple.gram_h();
                    Ok([
                        s * triple.operator_norm(sa, Space::VDual, Space::V)?,
                        s.powf(0.5 * gamma)
                            * triple.operator_norm(sa, Space::VGammaDual(gamma), Space::H)?,
                        s.powf(0.5 * (1.0 + gamma))
                            * triple.operator_norm(sa, Space::VGammaDual(gamma), Space::V)?,
                        s * triple.operator_norm(&(&a_over_h * &sp), Space::H, Space::H)?,
                        triple.operator_norm(&sp, Space::V, Space::V)?,
                    ])
                })
                .collect::<Result<_>>()?;
            for (row, &s) in s_rows.iter().zip(&plan.durations) {
                for (k, &v) in row.iter().enumerate() {
                    best[6 + k].offer(v, (s, 0.0), t);
                }
            }
            let inv = op.inv_sqrt(&eye, FracMethod::Auto)?;
            let kappa = triple.operator_norm(&inv, Space::VDual, Space::H)?;
            let c0 = triple.operator_norm(&(&inv * triple.gram_h()), Space::V, Space::V)?;
            Ok((best, kappa, c0))
        })
        .collect::<Result<_>>()?;
    let mut best = vec![Best::none(); 11];
    let mut kappa: f64 = 0.0;
    let mut c0: f64 = 0.0;
    for (b, k, c) in per_time {
        for i in 0..11 {
            best[i].offer(b[i].value, b[i].arg, b[i].t);
        }
        kappa = kappa.max(k);
        c0 = c0.max(c);
    }
    Ok(EstimateSuiteReport {
        items: best
            .iter()
            .enumerate()
            .map(|(i, b)| SuiteItem {
                id: i + 1,
                label: LABELS[i].to_string(),
                constant: b.value,
                argmax: b.arg,
                at_time: b.t,
            })
            .collect(),
        lambda_count: plan.lambdas.len(),
        duration_count: plan.durations.len(),
        kappa,
        c0,
    })
}

/// Matrices of `A^{1/2}` (primal to primal) and `𝒜^{-1/2}` (action to primal).
fn root_matrices(op: &FrozenOperator, method: FracMethod) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = op.dim();
    let inv = op.inv_sqrt(&DMatrix::identity(n, n), method)?;
    let sqrt = &inv * op.matrix();
    Ok((sqrt, inv))
}

/// `σ̂ = sup_t max(||A^{1/2}||_{L(V,H)}, ||A^{-1/2}||_{L(H,V)})`.
pub fn square_root_property_check(form: &NonAutonomousForm, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let per_time: Vec<f64> = grid
        .par_iter()
        .map(|&t| -> Result<f64> {
            let op = FrozenOperator::of_form(form, t)?;
            let triple = op.triple();
            let (sqrt, inv) = root_matrices(&op, FracMethod::Auto)?;
            let up = triple.operator_norm(&sqrt, Space::V, Space::H)?;
            let down = triple.operator_norm(&(&inv * triple.gram_h()), Space::H, Space::V)?;
            Ok(up.max(down))
        })
        .collect::<Result<_>>()?;
    Ok(per_time.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderRow {
    pub t: f64,
    pub s: f64,
    pub omega: f64,
    /// `||𝒜^{-1/2}(t) - 𝒜^{-1/2}(s)||_{L(V',H)}`, `||A^{-1/2}(t) - A^{-1/2}(s)||_{L(H,V)}`,
    /// `||A^{1/2}(t) - A^{1/2}(s)||_{L(V,H)}`.
    pub differences: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqrtHolderReport {
    pub rows: Vec<HolderRow>,
    /// Max of difference / `ω̂(|t-s|)` per norm.
    pub max_ratios: [f64; 3],
}

/// Differences of the square roots at `(t, s)` pairs against the modulus.
pub fn sqrt_holder_suite(
    form: &NonAutonomousForm,
    pairs: &[(f64, f64)],
    modulus: &DiniModulus,
) -> Result<SqrtHolderReport> {
    let mut times: Vec<f64> = pairs.iter().flat_map(|&(t, s)| [t, s]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let roots: Vec<(DMatrix<f64>, DMatrix<f64>)> = times
        .par_iter()
        .map(|&t| root_matrices(&FrozenOperator::of_form(form, t)?, FracMethod::Auto))
        .collect::<Result<_>>()?;
    let triple = form.triple();
    let idx = |t: f64| times.iter().position(|&x| x == t).expect("collected");
    let rows: Vec<HolderRow> = pairs
        .par_iter()
        .map(|&(t, s)| -> Result<HolderRow> {
            let (st, it) = &roots[idx(t)];
            let (ss, is) = &roots[idx(s)];
            let di = it - is;
            Ok(HolderRow {
                t,
                s,
                omega: modulus.omega_at((t - s).abs()),
                differences: [
                    triple.operator_norm(&di, Space::VDual, Space::H)?,
                    triple.operator_norm(&(&di * triple.gram_h()), Space::H, Space::V)?,
                    triple.operator_norm(&(st - ss), Space::V, Space::H)?,
                ],
            })
        })
        .collect::<Result<_>>()?;
    let mut max_ratios = [0.0f64; 3];
    for row in &rows {
        if row.omega > 0.0 {
            for k in 0..3 {
                max_ratios[k] = max_ratios[k].max(row.differences[k] / row.omega);
            }
        }
    }
    Ok(SqrtHolderReport { rows, max_ratios })
}
