//! Implicit Euler and Crank–Nicolson for `H u' + A(t) u = f(t)`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::form::NonAutonomousForm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ImplicitEuler,
    #[default]
    CrankNicolson,
}

impl Scheme {
    pub fn order(self) -> i32 {
        match self {
            Scheme::ImplicitEuler => 1,
            Scheme::CrankNicolson => 2,
        }
    }
}

pub type Forcing<'a> = &'a (dyn Fn(f64) -> DMatrix<f64> + Sync);

fn check_grid(s: f64, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid[0] != s {
        return Err(Error::Invalid(format!("grid must start at s = {s}")));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Invalid("time grid must be strictly increasing".into()));
    }
    Ok(())
}

fn solve_checked(m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let u = m.lu().solve(rhs)?;
    u.iter().all(|x| x.is_finite()).then_some(u)
}

/// Solves from `u(s) = x` (primal columns) along `grid`, with optional
/// action-valued forcing.
pub fn step_solve_forced(
    form: &NonAutonomousForm,
    s: f64,
    x: &DMatrix<f64>,
    grid: &[f64],
    scheme: Scheme,
    forcing: Option<Forcing>,
) -> Result<Trajectory> {
    check_grid(s, grid)?;
    let h = form.triple().gram_h();
    let mut values = Vec::with_capacity(grid.len());
    values.push(x.clone());
    let mut fallback_steps = 0;
    let mut a_prev = form.at(grid[0]);
    let mut f_prev = forcing.map(|f| f(grid[0]));
    for k in 1..grid.len() {
        let (t0, t1) = (grid[k - 1], grid[k]);
        let dt = t1 - t0;
        let u = &values[k - 1];
        let a_next = form.at(t1);
        let f_next = forcing.map(|f| f(t1));
        let implicit_euler = |u: &DMatrix<f64>| {
            let mut rhs = h * u;
            if let Some(f) = &f_next {
                rhs += f * dt;
            }
            solve_checked(h + &a_next * dt, &rhs)
        };
        let next = match scheme {
            Scheme::ImplicitEuler => implicit_euler(u),
            Scheme::CrankNicolson => {
                let mut rhs = h * u - (&a_prev * u) * (0.5 * dt);
                if let (Some(f0), Some(f1)) = (&f_prev, &f_next) {
                    rhs += (f0 + f1) * (0.5 * dt);
                }
                match solve_checked(h + &a_next * (0.5 * dt), &rhs) {
                    Some(v) => Some(v),
                    None => {
                        fallback_steps += 1;
                        implicit_euler(u)
                    }
                }
            }
        };
        let next = next.ok_or(Error::SingularStep { t: t1, dt })?;
        values.push(next);
        a_prev = a_next;
        f_prev = f_next;
    }
    Ok(Trajectory {
        s,
        times: grid.to_vec(),
        values,
        fallback_steps,
    })
}

pub fn step_solve(
    form: &NonAutonomousForm,
    s: f64,
    x: &DMatrix<f64>,
    grid: &[f64],
    scheme: Scheme,
) -> Result<Trajectory> {
    step_solve_forced(form, s, x, grid, scheme, None)
}

/// Bisects every interval of `grid`.
pub fn bisect(grid: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * grid.len());
    for w in grid.windows(2) {
        out.push(w[0]);
        out.push(0.5 * (w[0] + w[1]));
    }
    out.extend(grid.last());
    out
}

/// Richardson extrapolation `(2^p u_{h/2} - u_h)/(2^p - 1)` at the nodes of `grid`.
pub fn step_solve_extrapolated(
    form: &NonAutonomousForm,
    s: f64,
    x: &DMatrix<f64>,
    grid: &[f64],
    scheme: Scheme,
    forcing: Option<Forcing>,
) -> Result<Trajectory> {
    let coarse = step_solve_forced(form, s, x, grid, scheme, forcing)?;
    let fine = step_solve_forced(form, s, x, &bisect(grid), scheme, forcing)?;
    let w = f64::powi(2.0, scheme.order());
    let values = coarse
        .values
        .iter()
        .enumerate()
        .map(|(k, c)| (&fine.values[2 * k] * w - c) / (w - 1.0))
        .collect();
    Ok(Trajectory {
        s,
        times: coarse.times,
        values,
        fallback_steps: coarse.fallback_steps + fine.fallback_steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::GelfandTriple;
    use std::sync::Arc;

    fn scalar(a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> NonAutonomousForm {
        let one = DMatrix::from_element(1, 1, 1.0);
        let triple = Arc::new(GelfandTriple::new(one.clone(), one).unwrap());
        NonAutonomousForm::new(triple, 1.0, 0.0, move |t| DMatrix::from_element(1, 1, a(t))).unwrap()
    }

    fn uniform(m: usize) -> Vec<f64> {
        (0..=m).map(|k| k as f64 / m as f64).collect()
    }

    fn end_error(f: &NonAutonomousForm, m: usize, scheme: Scheme, exact: f64) -> f64 {
        let x = DMatrix::from_element(1, 1, 1.0);
        (step_solve(f, 0.0, &x, &uniform(m), scheme).unwrap().last()[(0, 0)] - exact).abs()
    }

    #[test]
    fn scalar_orders() {
        let f = scalar(|_| 1.0);
        let e = (-1.0f64).exp();
        for (scheme, p) in [(Scheme::ImplicitEuler, 1.0), (Scheme::CrankNicolson, 2.0)] {
            let ratio = end_error(&f, 64, scheme, e) / end_error(&f, 128, scheme, e);
            assert!((ratio.log2() - p).abs() < 0.1, "{scheme:?}: {ratio}");
        }
    }

    #[test]
    fn time_dependent_scalar_converges() {
        let f = scalar(|t| 1.0 + t);
        let exact = (-1.5f64).exp();
        assert!(end_error(&f, 512, Scheme::CrankNicolson, exact) < 1e-6);
        let x = DMatrix::from_element(1, 1, 1.0);
        let r = step_solve_extrapolated(&f, 0.0, &x, &uniform(64), Scheme::CrankNicolson, None).unwrap();
        assert!((r.last()[(0, 0)] - exact).abs() < 1e-8);
    }

    #[test]
    fn implicit_euler_energy_decays() {
        let f = scalar(|t| 0.5 + t * t);
        let x = DMatrix::from_element(1, 1, 2.0);
        let r = step_solve(&f, 0.0, &x, &uniform(10), Scheme::ImplicitEuler).unwrap();
        assert!(r.values.windows(2).all(|w| w[1][(0, 0)].abs() <= w[0][(0, 0)].abs()));
    }

    #[test]
    fn grid_must_start_at_s() {
        let f = scalar(|_| 1.0);
        let x = DMatrix::from_element(1, 1, 1.0);
        assert!(step_solve(&f, 0.5, &x, &uniform(4), Scheme::CrankNicolson).is_err());
    }
}
