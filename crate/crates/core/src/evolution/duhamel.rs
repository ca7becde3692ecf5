//! `v(t) = ∫_{t_0}^t U(t, r) f(r) dr` for an action-valued forcing `f`, by
//! trapezoid quadrature over a table grid and by forced stepping.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::stepper::{step_solve_extrapolated, Forcing, Scheme};
use super::table::EvolutionTable;
use super::{MeshSpec, Trajectory};
use crate::error::{Error, Result};
use crate::form::NonAutonomousForm;
use crate::spaces::GelfandTriple;

#[derive(Debug, Clone)]
pub struct DuhamelReport {
    pub quadrature: Trajectory,
    pub stepped: Trajectory,
    pub summary: DuhamelSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuhamelSummary {
    /// `max_i ||v_quad(t_i) - v_step(t_i)||_H`.
    pub max_difference: f64,
    pub max_norm: f64,
    pub fallback_steps: usize,
}

fn h_norm(triple: &GelfandTriple, v: &DMatrix<f64>) -> f64 {
    super::column_norm_max(triple.gram_h(), v)
}

/// Trapezoid sum `Σ_j w_j U(t_i, t_j) H^{-1} f(t_j)` over a full table.
pub fn duhamel_quadrature(
    table: &EvolutionTable,
    triple: &GelfandTriple,
    forcing: Forcing,
) -> Result<Trajectory> {
    if !table.is_full() {
        return Err(Error::InsufficientGrid(
            "Duhamel quadrature needs every column of the table".into(),
        ));
    }
    let grid = &table.grid;
    let g: Vec<DMatrix<f64>> = grid.iter().map(|&t| triple.to_primal(&forcing(t))).collect();
    let mut values = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let mut v = DMatrix::<f64>::zeros(table.dim, g[0].ncols());
        for j in 0..i {
            let dt = 0.5 * (grid[j + 1] - grid[j]);
            v += &table.entries[&(i, j)] * &g[j] * dt;
            v += &table.entries[&(i, j + 1)] * &g[j + 1] * dt;
        }
        values.push(v);
    }
    Ok(Trajectory {
        s: grid[0],
        times: grid.clone(),
        values,
        fallback_steps: 0,
    })
}

/// Both routes on the table grid. `form` must be the family the table holds.
pub fn duhamel_solve(
    form: &NonAutonomousForm,
    table: &EvolutionTable,
    forcing: Forcing,
    mesh: &MeshSpec,
) -> Result<DuhamelReport> {
    if table.shift != form.shift() {
        return Err(Error::Invalid(format!(
            "table shift {} differs from the form shift {}",
            table.shift,
            form.shift()
        )));
    }
    let triple = form.triple();
    let quadrature = duhamel_quadrature(table, triple, forcing)?;
    let s = table.grid[0];
    let end = *table.grid.last().unwrap();
    let cols = quadrature.values[0].ncols();
    let nodes = mesh.build(form.horizon(), s, end, &table.grid, form.singular_times());
    let zero = DMatrix::<f64>::zeros(form.dim(), cols);
    let stepped = step_solve_extrapolated(form, s, &zero, &nodes, Scheme::CrankNicolson, Some(forcing))?
        .restrict(&table.grid)?;
    let mut summary = DuhamelSummary {
        max_difference: 0.0,
        max_norm: 0.0,
        fallback_steps: stepped.fallback_steps,
    };
    for (q, p) in quadrature.values.iter().zip(&stepped.values) {
        summary.max_difference = summary.max_difference.max(h_norm(triple, &(q - p)));
        summary.max_norm = summary.max_norm.max(h_norm(triple, p));
    }
    Ok(DuhamelReport {
        quadrature,
        stepped,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{build_table, CertifiedForm, Method, TableOptions};
    use std::sync::Arc;

    fn scalar(a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> NonAutonomousForm {
        let one = DMatrix::from_element(1, 1, 1.0);
        let triple = Arc::new(GelfandTriple::new(one.clone(), one).unwrap());
        NonAutonomousForm::new(triple, 1.0, 0.0, move |t| DMatrix::from_element(1, 1, a(t))).unwrap()
    }

    fn table(f: &NonAutonomousForm, m: usize) -> EvolutionTable {
        let grid: Vec<f64> = (0..=m).map(|k| k as f64 / m as f64).collect();
        build_table(&CertifiedForm::uncertified(f.clone()), &grid, Method::Stepper, &TableOptions::default()).unwrap()
    }

    #[test]
    fn zero_forcing_gives_zero() {
        let f = scalar(|t| 1.0 + t);
        let t = table(&f, 8);
        let zero = |_: f64| DMatrix::from_element(1, 1, 0.0);
        let r = duhamel_solve(&f, &t, &zero, &TableOptions::default().stepper_mesh).unwrap();
        assert_eq!(r.summary.max_norm, 0.0);
        assert_eq!(r.summary.max_difference, 0.0);
    }

    #[test]
    fn constant_forcing_of_autonomous_scalar() {
        let f = scalar(|_| 2.0);
        let t = table(&f, 256);
        let one = |_: f64| DMatrix::from_element(1, 1, 1.0);
        let r = duhamel_solve(&f, &t, &one, &TableOptions::default().stepper_mesh).unwrap();
        for (tt, v) in r.stepped.times.iter().zip(&r.stepped.values) {
            let want = (1.0 - (-2.0 * tt).exp()) / 2.0;
            assert!((v[(0, 0)] - want).abs() < 1e-9);
        }
        assert!(r.summary.max_difference < 1e-5, "{}", r.summary.max_difference);
    }
}
