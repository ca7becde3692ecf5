//! The evolution family `U(t, s)`: a reference time stepper, the Volterra
//! representation solved by a Neumann series, tables over a time grid, and
//! the checks run on them.

pub mod duhamel;
pub mod neumann;
pub mod stepper;
pub mod table;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spaces::GelfandTriple;

pub use duhamel::{duhamel_quadrature, duhamel_solve, DuhamelReport, DuhamelSummary};
pub use neumann::{
    dini_gate, kernel_norm_bound, neumann_solve, p_apply, p_norm_and_shift, p_norm_estimate,
    probe_norm_estimate, u1_apply, CertificateSummary, CertifiedForm, NeumannOptions,
    NeumannSolution, ShiftOptions, CERTIFIED_NORM,
};
pub use stepper::{step_solve, step_solve_extrapolated, step_solve_forced, Scheme};
pub use table::{
    build_table, compare_tables, contractivity_energy_check, energy_check_trajectory,
    evolution_law_residual,
    EnergyReport, EvolutionTable, Method, TableOptions, TableStats,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Grading {
    Uniform,
    Geometric { toward: f64, ratio: f64 },
    /// Union of a uniform base and geometric refinements.
    Composite,
}

/// Strictly increasing time nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub nodes: Vec<f64>,
    pub grading: Grading,
}

impl TimeGrid {
    pub fn new(nodes: Vec<f64>, grading: Grading) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Invalid("time grid must be strictly increasing".into()));
        }
        Ok(TimeGrid { nodes, grading })
    }

    pub fn uniform(start: f64, end: f64, intervals: usize) -> Self {
        let m = intervals.max(1);
        let nodes = (0..=m)
            .map(|k| {
                if k == m {
                    end
                } else {
                    start + (end - start) * k as f64 / m as f64
                }
            })
            .collect();
        TimeGrid {
            nodes,
            grading: Grading::Uniform,
        }
    }

    /// `s + d·ratio^k` for `k >= 0` down to `floor`, then `end`.
    pub fn geometric(s: f64, end: f64, ratio: f64, floor: f64) -> Self {
        let mut nodes = vec![s];
        let mut d = end - s;
        let mut tail = Vec::new();
        while d > floor {
            tail.push(s + d);
            d *= ratio;
        }
        tail.reverse();
        nodes.extend(tail);
        TimeGrid {
            nodes,
            grading: Grading::Geometric { toward: s, ratio },
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn position(&self, t: f64) -> Option<usize> {
        find_node(&self.nodes, t)
    }
}

/// Index of the node equal to `t` up to a relative `1e-12`.
pub fn find_node(nodes: &[f64], t: f64) -> Option<usize> {
    let tol = 1e-12 * t.abs().max(1.0);
    let k = nodes.partition_point(|&x| x < t - tol);
    (k < nodes.len() && (nodes[k] - t).abs() <= tol).then_some(k)
}

/// Mesh parameters shared by the stepper and the Volterra solver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    /// Uniform base `T / base_steps`, aligned with `0`.
    pub base_steps: usize,
    /// Geometric ratio of the refinement toward the initial time and the
    /// form's singular times, in `(0, 1)`.
    pub ratio: f64,
    /// Smallest refinement offset, relative to `T`.
    pub floor: f64,
}

impl MeshSpec {
    /// Nodes on `[s, end]`: the uniform base, geometric refinement toward `s`
    /// and each singular time in `[s, end)`, and every `required` node.
    pub fn build(&self, horizon: f64, s: f64, end: f64, required: &[f64], singular: &[f64]) -> Vec<f64> {
        let d = horizon / self.base_steps.max(1) as f64;
        let floor = self.floor * horizon;
        let mut nodes = vec![s, end];
        let k0 = (s / d).floor() as i64;
        let k1 = (end / d).ceil() as i64;
        for k in k0..=k1 {
            let t = k as f64 * d;
            if t > s && t < end {
                nodes.push(t);
            }
        }
        let mut anchors = vec![s];
        anchors.extend(singular.iter().copied().filter(|&x| x >= s && x < end));
        // Offsets shrink by `ratio` from where the geometric step matches `d`.
        let top = d * self.ratio / (1.0 - self.ratio);
        for a in anchors {
            let mut off = top;
            while off > floor {
                if a + off < end {
                    nodes.push(a + off);
                }
                off *= self.ratio;
            }
        }
        nodes.extend(required.iter().copied().filter(|&x| x >= s && x <= end));
        nodes.sort_by(f64::total_cmp);
        // Merge near-duplicates, keeping required nodes verbatim.
        let tol = 1e-12 * horizon.max(1.0);
        let mut out: Vec<f64> = Vec::with_capacity(nodes.len());
        for t in nodes {
            match out.last_mut() {
                Some(last) if t - *last <= tol => {
                    if required.iter().any(|&r| r == t) || t == end {
                        *last = t;
                    }
                }
                _ => out.push(t),
            }
        }
        if let Some(first) = out.first_mut() {
            *first = s;
        }
        out
    }
}

/// Solution blocks `u(t_k)` (one column per initial vector) on a mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub s: f64,
    pub times: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
    /// Crank–Nicolson steps that fell back to implicit Euler.
    pub fallback_steps: usize,
}

impl Trajectory {
    pub fn initial(&self) -> &DMatrix<f64> {
        &self.values[0]
    }

    pub fn at(&self, t: f64) -> Option<&DMatrix<f64>> {
        find_node(&self.times, t).map(|k| &self.values[k])
    }

    pub fn last(&self) -> &DMatrix<f64> {
        self.values.last().expect("nonempty trajectory")
    }

    /// Restriction to the nodes in `keep`.
    pub fn restrict(&self, keep: &[f64]) -> Result<Trajectory> {
        let mut times = Vec::new();
        let mut values = Vec::new();
        for &t in keep {
            let v = self
                .at(t)
                .ok_or_else(|| Error::GridTooCoarse(format!("time {t} is not a mesh node")))?;
            times.push(t);
            values.push(v.clone());
        }
        Ok(Trajectory {
            s: self.s,
            times,
            values,
            fallback_steps: self.fallback_steps,
        })
    }

    /// Max over nodes and columns of the V-norm.
    pub fn sup_v(&self, triple: &GelfandTriple) -> f64 {
        self.values
            .iter()
            .map(|v| column_norm_max(triple.gram_v(), v))
            .fold(0.0, f64::max)
    }
}

/// `max_c sqrt(u_c^T G u_c)` over the columns of `u`.
pub fn column_norm_max(gram: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
    let gu = gram * u;
    (0..u.ncols())
        .map(|c| u.column(c).dot(&gu.column(c)).max(0.0).sqrt())
        .fold(0.0, f64::max)
}

/// `u(t) ↦ e^{μ(t - s)} u(t)`, undoing the substitution `v = e^{-μ(t-s)} u`.
pub fn unshift(traj: &Trajectory, mu: f64, s: f64) -> Trajectory {
    let mut out = traj.clone();
    for (t, v) in out.times.iter().zip(out.values.iter_mut()) {
        *v *= (mu * (t - s)).exp();
    }
    out
}
