//! `U(t_i, t_j)` on a grid, by the stepper or by the Neumann series, and the
//! checks run on a finished table.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::neumann::{neumann_solve, CertifiedForm, NeumannOptions};
use super::stepper::{step_solve, step_solve_extrapolated, Scheme};
use super::{find_node, MeshSpec, Trajectory};
use crate::error::{Error, Result};
use crate::report;
use crate::spaces::{GelfandTriple, Space};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Stepper,
    Neumann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableOptions {
    /// Initial-time indices to solve from; `None` for all.
    pub columns: Option<Vec<usize>>,
    pub scheme: Scheme,
    pub richardson: bool,
    pub stepper_mesh: MeshSpec,
    pub neumann: NeumannOptions,
}

impl Default for TableOptions {
    fn default() -> Self {
        TableOptions {
            columns: None,
            scheme: Scheme::CrankNicolson,
            richardson: true,
            stepper_mesh: MeshSpec {
                base_steps: 256,
                ratio: 0.7,
                floor: 1e-9,
            },
            neumann: NeumannOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub fallback_steps: usize,
    /// Series length per solved column (Neumann only).
    pub iterations: Vec<usize>,
    /// Largest increment ratio over all columns (Neumann only).
    pub max_ratio: f64,
    pub max_tail_bound: f64,
    pub mesh_nodes: Vec<usize>,
}

/// Entries `U(t_i, t_j)`, `i >= j`, for the solved columns `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionTable {
    pub grid: Vec<f64>,
    pub method: Method,
    /// Shift `μ` of the family the entries belong to.
    pub shift: f64,
    pub dim: usize,
    pub columns: Vec<usize>,
    pub entries: BTreeMap<(usize, usize), DMatrix<f64>>,
    pub stats: TableStats,
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    i: usize,
    j: usize,
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    dim: usize,
    grid: Vec<f64>,
    method: Method,
    shift: f64,
    columns: Vec<usize>,
    stats: TableStats,
    entries: Vec<EntryFile>,
}

impl EvolutionTable {
    pub fn get(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.entries.get(&(i, j))
    }

    /// Every column solved.
    pub fn is_full(&self) -> bool {
        self.columns.len() == self.grid.len()
    }

    /// Entries of the unshifted family, `e^{μ(t_i - t_j)} U_μ(t_i, t_j)`.
    pub fn unshifted(&self) -> EvolutionTable {
        let mut out = self.clone();
        for (&(i, j), m) in out.entries.iter_mut() {
            *m *= (self.shift * (self.grid[i] - self.grid[j])).exp();
        }
        out.shift = 0.0;
        out
    }

    /// `(i, j, ||U||_{L(H)}, ||U||_{L(V)})` for every entry.
    pub fn pair_norms(&self, triple: &GelfandTriple) -> Result<Vec<(usize, usize, f64, f64)>> {
        self.entries
            .par_iter()
            .map(|(&(i, j), m)| {
                Ok((
                    i,
                    j,
                    triple.operator_norm(m, Space::H, Space::H)?,
                    triple.operator_norm(m, Space::V, Space::V)?,
                ))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TableFile {
            dim: self.dim,
            grid: self.grid.clone(),
            method: self.method,
            shift: self.shift,
            columns: self.columns.clone(),
            stats: self.stats.clone(),
            entries: self
                .entries
                .iter()
                .map(|(&(i, j), m)| EntryFile {
                    i,
                    j,
                    data: m.transpose().as_slice().to_vec(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: TableFile = serde_json::from_str(text)?;
        let n = file.dim;
        let mut entries = BTreeMap::new();
        for e in file.entries {
            if e.data.len() != n * n {
                return Err(Error::DimensionMismatch {
                    expected: n * n,
                    found: e.data.len(),
                });
            }
            if e.i >= file.grid.len() || e.j > e.i {
                return Err(Error::Invalid(format!("bad table index ({}, {})", e.i, e.j)));
            }
            entries.insert((e.i, e.j), DMatrix::from_row_slice(n, n, &e.data));
        }
        Ok(EvolutionTable {
            grid: file.grid,
            method: file.method,
            shift: file.shift,
            dim: n,
            columns: file.columns,
            entries,
            stats: file.stats,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        report::write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

struct Column {
    j: usize,
    values: Vec<(usize, DMatrix<f64>)>,
    fallback_steps: usize,
    iterations: usize,
    max_ratio: f64,
    tail_bound: f64,
    mesh_nodes: usize,
}

fn check_grid(grid: &[f64], horizon: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 || *grid.last().unwrap() > horizon {
        return Err(Error::Invalid(format!(
            "table grid must be strictly increasing in [0, {horizon}]"
        )));
    }
    Ok(())
}

/// Solves from every selected `t_j` with the identity as initial block.
pub fn build_table(
    cert: &CertifiedForm,
    grid: &[f64],
    method: Method,
    opts: &TableOptions,
) -> Result<EvolutionTable> {
    let form = &cert.form;
    check_grid(grid, form.horizon())?;
    let m = grid.len();
    let columns: Vec<usize> = match &opts.columns {
        Some(c) => {
            let mut c = c.clone();
            c.sort_unstable();
            c.dedup();
            if c.iter().any(|&j| j >= m) {
                return Err(Error::Invalid("table column index out of range".into()));
            }
            c
        }
        None => (0..m).collect(),
    };
    if method == Method::Neumann && !cert.is_certified() {
        return Err(Error::NoCertifiedShift {
            estimate: cert.estimate,
        });
    }
    let n = form.dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let solved: Vec<Column> = columns
        .par_iter()
        .map(|&j| -> Result<Column> {
            let s = grid[j];
            let mut col = Column {
                j,
                values: Vec::new(),
                fallback_steps: 0,
                iterations: 0,
                max_ratio: 0.0,
                tail_bound: 0.0,
                mesh_nodes: 1,
            };
            if j + 1 == m {
                return Ok(col);
            }
            let end = grid[m - 1];
            let traj = match method {
                Method::Stepper => {
                    let mesh =
                        opts.stepper_mesh
                            .build(form.horizon(), s, end, &grid[j..], form.singular_times());
                    let traj = if opts.richardson {
                        step_solve_extrapolated(form, s, &eye, &mesh, opts.scheme, None)?
                    } else {
                        step_solve(form, s, &eye, &mesh, opts.scheme)?
                    };
                    col.fallback_steps = traj.fallback_steps;
                    traj
                }
                Method::Neumann => {
                    let sol = neumann_solve(cert, s, &eye, &grid[j..], &opts.neumann)?;
                    col.iterations = sol.iterations;
                    col.max_ratio = sol.ratios.iter().copied().fold(0.0, f64::max);
                    col.tail_bound = sol.tail_bound;
                    sol.trajectory
                }
            };
            col.mesh_nodes = traj.times.len();
            for i in j + 1..m {
                let k = find_node(&traj.times, grid[i]).ok_or_else(|| {
                    Error::GridTooCoarse(format!("grid time {} missing from the mesh", grid[i]))
                })?;
                col.values.push((i, traj.values[k].clone()));
            }
            Ok(col)
        })
        .collect::<Result<_>>()?;
    let mut entries = BTreeMap::new();
    let mut stats = TableStats::default();
    for col in solved {
        entries.insert((col.j, col.j), eye.clone());
        for (i, v) in col.values {
            entries.insert((i, col.j), v);
        }
        stats.fallback_steps += col.fallback_steps;
        if method == Method::Neumann {
            stats.iterations.push(col.iterations);
            stats.max_ratio = stats.max_ratio.max(col.max_ratio);
            stats.max_tail_bound = stats.max_tail_bound.max(col.tail_bound);
        }
        stats.mesh_nodes.push(col.mesh_nodes);
    }
    Ok(EvolutionTable {
        grid: grid.to_vec(),
        method,
        shift: form.shift(),
        dim: n,
        columns,
        entries,
        stats,
    })
}

/// `max_{i>=k>=j} ||U(t_i,t_j) - U(t_i,t_k) U(t_k,t_j)||_{L(H)}`.
pub fn evolution_law_residual(table: &EvolutionTable, triple: &GelfandTriple) -> Result<f64> {
    if !table.is_full() {
        return Err(Error::InsufficientGrid(
            "the evolution law needs every column of the table".into(),
        ));
    }
    let m = table.grid.len();
    let w = triple.weight(Space::H);
    let w_inv = triple.weight_inv(Space::H);
    // Work in H-orthonormal coordinates, where the L(H) norm is spectral.
    let hat: BTreeMap<(usize, usize), DMatrix<f64>> = table
        .entries
        .iter()
        .map(|(&k, u)| (k, &w * u * &w_inv))
        .collect();
    let triples: Vec<(usize, usize, usize)> = (0..m)
        .flat_map(|i| (0..=i).flat_map(move |k| (0..=k).map(move |j| (i, k, j))))
        .filter(|&(i, k, j)| k != i && k != j)
        .collect();
    let worst = triples
        .par_iter()
        .map(|&(i, k, j)| {
            let d = &hat[&(i, j)] - &hat[&(i, k)] * &hat[&(k, j)];
            crate::linalg::sigma_max(&d)
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub max_h_norm: f64,
    pub contractive: bool,
    /// Largest `||U x||_H^2 - ||x||_H^2 + 2α ∫ ||U(r) x||_V^2 dr` over pairs
    /// and H-orthonormal `x`; nonpositive when the inequality holds.
    pub worst_energy_gap: f64,
    /// Trapezoid-versus-left-sum difference of the integral at the worst pair.
    pub quadrature_slack: f64,
    pub energy_holds: bool,
    pub tol: f64,
}

/// Checks `||U(t,s)||_{L(H)} <= 1 + tol` and the integrated energy inequality
/// along every solved column.
pub fn contractivity_energy_check(
    table: &EvolutionTable,
    triple: &GelfandTriple,
    alpha: f64,
    tol: f64,
) -> Result<EnergyReport> {
    let z = triple.pencil_basis();
    let (gh, gv) = (triple.gram_h(), triple.gram_v());
    let m = table.grid.len();
    let per_col: Vec<(f64, f64, f64, bool)> = table
        .columns
        .par_iter()
        .map(|&j| -> Result<(f64, f64, f64, bool)> {
            let mut max_h: f64 = 0.0;
            let mut worst = f64::NEG_INFINITY;
            let mut slack = 0.0;
            let mut holds = true;
            // ||U(t_i, t_j) z_c||^2 for each H-orthonormal basis vector z_c.
            let mut prev_v: Option<Vec<f64>> = None;
            let mut trap = vec![0.0; triple.dim()];
            let mut left = vec![0.0; triple.dim()];
            for i in j..m {
                let u = &table.entries[&(i, j)];
                max_h = max_h.max(triple.operator_norm(u, Space::H, Space::H)?);
                let y = u * z;
                let hy = gh * &y;
                let vy = gv * &y;
                let eh: Vec<f64> = (0..y.ncols()).map(|c| y.column(c).dot(&hy.column(c))).collect();
                let ev: Vec<f64> = (0..y.ncols()).map(|c| y.column(c).dot(&vy.column(c))).collect();
                if let Some(pv) = &prev_v {
                    let dt = table.grid[i] - table.grid[i - 1];
                    for c in 0..ev.len() {
                        trap[c] += 0.5 * dt * (pv[c] + ev[c]);
                        left[c] += dt * pv[c].min(ev[c]);
                    }
                }
                for c in 0..ev.len() {
                    let gap = eh[c] - 1.0 + 2.0 * alpha * trap[c];
                    let sl = (trap[c] - left[c]).abs() * 2.0 * alpha.abs();
                    if gap > worst {
                        worst = gap;
                        slack = sl;
                    }
                    if gap > sl + tol {
                        holds = false;
                    }
                }
                prev_v = Some(ev);
            }
            Ok((max_h, worst, slack, holds))
        })
        .collect::<Result<_>>()?;
    let mut rep = EnergyReport {
        max_h_norm: 0.0,
        contractive: true,
        worst_energy_gap: f64::NEG_INFINITY,
        quadrature_slack: 0.0,
        energy_holds: true,
        tol,
    };
    for (h, gap, sl, ok) in per_col {
        rep.max_h_norm = rep.max_h_norm.max(h);
        if gap > rep.worst_energy_gap {
            rep.worst_energy_gap = gap;
            rep.quadrature_slack = sl;
        }
        rep.energy_holds &= ok;
    }
    if !rep.worst_energy_gap.is_finite() {
        rep.worst_energy_gap = 0.0;
    }
    rep.contractive = rep.max_h_norm <= 1.0 + tol;
    Ok(rep)
}

/// The energy inequality along one implicit-Euler trajectory started from
/// H-orthonormal columns, with the right-endpoint sum the scheme satisfies
/// exactly. Also records the largest H-norm growth.
pub fn energy_check_trajectory(
    traj: &Trajectory,
    triple: &GelfandTriple,
    alpha: f64,
    tol: f64,
) -> EnergyReport {
    let (gh, gv) = (triple.gram_h(), triple.gram_v());
    let sq = |g: &DMatrix<f64>, y: &DMatrix<f64>| -> Vec<f64> {
        let gy = g * y;
        (0..y.ncols()).map(|c| y.column(c).dot(&gy.column(c))).collect()
    };
    let x0 = sq(gh, traj.initial());
    let cols = x0.len();
    let mut right = vec![0.0; cols];
    let mut trap = vec![0.0; cols];
    let mut prev_v = sq(gv, traj.initial());
    let mut rep = EnergyReport {
        max_h_norm: 0.0,
        contractive: true,
        worst_energy_gap: f64::NEG_INFINITY,
        quadrature_slack: 0.0,
        energy_holds: true,
        tol,
    };
    for k in 1..traj.times.len() {
        let dt = traj.times[k] - traj.times[k - 1];
        let y = &traj.values[k];
        let eh = sq(gh, y);
        let ev = sq(gv, y);
        for c in 0..cols {
            right[c] += dt * ev[c];
            trap[c] += 0.5 * dt * (prev_v[c] + ev[c]);
            let scale = x0[c].max(f64::MIN_POSITIVE);
            rep.max_h_norm = rep.max_h_norm.max((eh[c] / scale).sqrt());
            let gap = (eh[c] - x0[c] + 2.0 * alpha * right[c]) / scale;
            if gap > rep.worst_energy_gap {
                rep.worst_energy_gap = gap;
                rep.quadrature_slack = 2.0 * alpha.abs() * (trap[c] - right[c]).abs() / scale;
            }
        }
        prev_v = ev;
    }
    if !rep.worst_energy_gap.is_finite() {
        rep.worst_energy_gap = 0.0;
    }
    rep.energy_holds = rep.worst_energy_gap <= tol;
    rep.contractive = rep.max_h_norm <= 1.0 + tol;
    rep
}

/// Largest `||A - B||_{L(H)}` and the same relative to `||B||_{L(H)}` over
/// the entries both tables hold.
pub fn compare_tables(
    a: &EvolutionTable,
    b: &EvolutionTable,
    triple: &GelfandTriple,
) -> Result<(f64, f64)> {
    if a.grid.len() != b.grid.len()
        || a.grid.iter().zip(&b.grid).any(|(x, y)| (x - y).abs() > 1e-12)
    {
        return Err(Error::Invalid("tables live on different grids".into()));
    }
    if a.shift != b.shift {
        return Err(Error::Invalid("tables belong to different shifts".into()));
    }
    let mut abs: f64 = 0.0;
    let mut rel: f64 = 0.0;
    for (k, ua) in &a.entries {
        if let Some(ub) = b.entries.get(k) {
            let d = triple.operator_norm(&(ua - ub), Space::H, Space::H)?;
            let nb = triple.operator_norm(ub, Space::H, Space::H)?;
            abs = abs.max(d);
            if nb > 0.0 {
                rel = rel.max(d / nb);
            }
        }
    }
    Ok((abs, rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::NonAutonomousForm;
    use std::sync::Arc;

    fn scalar(a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> NonAutonomousForm {
        let one = DMatrix::from_element(1, 1, 1.0);
        let triple = Arc::new(GelfandTriple::new(one.clone(), one).unwrap());
        NonAutonomousForm::new(triple, 1.0, 0.0, move |t| DMatrix::from_element(1, 1, a(t))).unwrap()
    }

    #[test]
    fn scalar_stepper_table() {
        let f = scalar(|t| 1.0 + t);
        let grid = [0.0, 0.25, 0.5, 1.0];
        let t = build_table(&CertifiedForm::uncertified(f.clone()), &grid, Method::Stepper, &TableOptions::default()).unwrap();
        for j in 0..4 {
            assert_eq!(t.get(j, j).unwrap()[(0, 0)], 1.0);
            for i in j..4 {
                let (a, b) = (grid[i], grid[j]);
                let want = (-(a - b) - 0.5 * (a * a - b * b)).exp();
                assert!((t.get(i, j).unwrap()[(0, 0)] - want).abs() < 1e-9);
            }
        }
        assert!(evolution_law_residual(&t, f.triple()).unwrap() < 1e-9);
        let back = EvolutionTable::from_json_str(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn partial_table_has_no_law_residual() {
        let f = scalar(|_| 1.0);
        let opts = TableOptions {
            columns: Some(vec![0]),
            ..TableOptions::default()
        };
        let t = build_table(&CertifiedForm::uncertified(f.clone()), &[0.0, 0.5, 1.0], Method::Stepper, &opts).unwrap();
        assert!(evolution_law_residual(&t, f.triple()).is_err());
    }

    #[test]
    fn energy_identity_for_constant_scalar() {
        let f = scalar(|_| 2.0);
        let grid: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
        let opts = TableOptions {
            columns: Some(vec![0]),
            ..TableOptions::default()
        };
        let t = build_table(&CertifiedForm::uncertified(f.clone()), &grid, Method::Stepper, &opts).unwrap();
        let rep = contractivity_energy_check(&t, f.triple(), 2.0, 1e-10).unwrap();
        assert!(rep.contractive && rep.energy_holds);
        // Equality up to the trapezoid error.
        assert!(rep.worst_energy_gap.abs() < 1e-4, "{}", rep.worst_energy_gap);
    }

    #[test]
    fn implicit_euler_satisfies_energy_inequality() {
        let f = scalar(|t| 1.0 + t);
        let grid: Vec<f64> = (0..=50).map(|k| k as f64 / 50.0).collect();
        let x = DMatrix::from_element(1, 1, 1.0);
        let traj = step_solve(&f, 0.0, &x, &grid, Scheme::ImplicitEuler).unwrap();
        let rep = energy_check_trajectory(&traj, f.triple(), 1.0, 1e-12);
        assert!(rep.energy_holds && rep.contractive, "{rep:?}");
        let zero = step_solve(&f, 0.0, &DMatrix::zeros(1, 1), &grid, Scheme::ImplicitEuler).unwrap();
        let rep = energy_check_trajectory(&zero, f.triple(), 1.0, 1e-12);
        assert_eq!((rep.max_h_norm, rep.worst_energy_gap), (0.0, 0.0));
    }

    #[test]
    fn unshifted_view_restores_family() {
        let f = scalar(|_| 1.0);
        let t = build_table(&CertifiedForm::uncertified(f.shifted(2.0)), &[0.0, 1.0], Method::Stepper, &TableOptions::default()).unwrap();
        assert_eq!(t.shift, 2.0);
        let u = t.unshifted();
        assert!((u.get(1, 0).unwrap()[(0, 0)] - (-1.0f64).exp()).abs() < 1e-9);
    }
}
