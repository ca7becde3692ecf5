//! Post-processing of evolution tables: continuity moduli in `L(V)` and
//! `L(H)`, singular value profiles, Schatten norms, and the refinement study
//! of trace norms.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::{find_node, step_solve_extrapolated, EvolutionTable, MeshSpec, Scheme};
use crate::form::{DiniModulus, NonAutonomousForm};
use crate::spaces::{GelfandTriple, Space};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variation {
    /// `δ ↦ max_t ||U(t+δ, s) - U(t, s)||` at fixed `s`.
    FirstArgument,
    /// `δ ↦ max_s ||U(t, s+δ) - U(t, s)||` at fixed `t`.
    SecondArgument,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    HH,
    VV,
    HV,
}

impl Geometry {
    pub fn spaces(self) -> (Space, Space) {
        match self {
            Geometry::HH => (Space::H, Space::H),
            Geometry::VV => (Space::V, Space::V),
            Geometry::HV => (Space::H, Space::V),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusScan {
    pub space: String,
    pub variation: Variation,
    /// The fixed time.
    pub anchor: f64,
    /// Smallest distance `t - s` of the pairs that enter.
    pub min_separation: f64,
    pub deltas: Vec<f64>,
    pub values: Vec<f64>,
    /// Smallest `C` with `value <= C (ln(1 + δ/(t-s)) + ω(δ))` on every pair.
    pub fitted_c: f64,
    pub monotone: bool,
}

/// `finest · 2^k`, `k = 0..levels`, decreasing.
pub fn dyadic_deltas(finest: f64, levels: usize) -> Vec<f64> {
    (0..levels).rev().map(|k| finest * f64::powi(2.0, k as i32)).collect()
}

/// Moduli from pairs of table entries `δ` apart, in the `space` operator norm.
#[allow(clippy::too_many_arguments)]
pub fn norm_continuity_scan(
    table: &EvolutionTable,
    triple: &GelfandTriple,
    space: Space,
    variation: Variation,
    anchor: usize,
    deltas: &[f64],
    min_separation: f64,
    omega: Option<&DiniModulus>,
) -> Result<ModulusScan> {
    let grid = &table.grid;
    if anchor >= grid.len() {
        return Err(Error::Invalid(format!("anchor index {anchor} outside the grid")));
    }
    let min_gap = grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let smallest = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    if deltas.is_empty() || min_gap > smallest * (1.0 + 1e-9) {
        return Err(Error::GridTooCoarse(format!(
            "grid gap {min_gap} exceeds the smallest requested δ = {smallest}"
        )));
    }
    let fixed = grid[anchor];
    // (δ, t - s, pair) for every usable pair.
    let mut pairs = Vec::new();
    for (d, &delta) in deltas.iter().enumerate() {
        let mut found = false;
        for k in 0..grid.len() {
            let Some(l) = find_node(grid, grid[k] + delta) else {
                continue;
            };
            let (a, b, sep) = match variation {
                Variation::FirstArgument => ((l, anchor), (k, anchor), grid[k] - fixed),
                Variation::SecondArgument => ((anchor, l), (anchor, k), fixed - grid[l]),
            };
            if sep + 1e-12 < min_separation || sep <= 0.0 {
                continue;
            }
            // Only solved columns enter.
            if table.get(a.0, a.1).is_some() && table.get(b.0, b.1).is_some() {
                pairs.push((d, sep, a, b));
                found = true;
            }
        }
        if !found {
            return Err(Error::GridTooCoarse(format!(
                "no pair of solved entries {delta} apart"
            )));
        }
    }
    let norms: Vec<(usize, f64, f64)> = pairs
        .par_iter()
        .map(|&(d, sep, a, b)| {
            let diff = &table.entries[&a] - &table.entries[&b];
            Ok((d, sep, triple.operator_norm(&diff, space, space)?))
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0f64; deltas.len()];
    let mut fitted_c = 0.0f64;
    for &(d, sep, v) in &norms {
        values[d] = values[d].max(v);
        let shape = (1.0 + deltas[d] / sep).ln() + omega.map_or(0.0, |o| o.omega_at(deltas[d]));
        if shape > 0.0 {
            fitted_c = fitted_c.max(v / shape);
        }
    }
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].total_cmp(&deltas[b]));
    let monotone = order.windows(2).all(|w| values[w[0]] <= values[w[1]]);
    Ok(ModulusScan {
        space: space.label(),
        variation,
        anchor: fixed,
        min_separation,
        deltas: deltas.to_vec(),
        values,
        fitted_c,
        monotone,
    })
}

/// Singular values of `U(t_i, t_j)` in the given geometry, decreasing.
pub fn singular_value_profile(
    table: &EvolutionTable,
    triple: &GelfandTriple,
    i: usize,
    j: usize,
    geometry: Geometry,
) -> Result<Vec<f64>> {
    if i <= j {
        return Err(Error::Invalid(format!("need t > s, got indices ({i}, {j})")));
    }
    let u = table
        .get(i, j)
        .ok_or_else(|| Error::InsufficientGrid(format!("table has no entry ({i}, {j})")))?;
    let (from, to) = geometry.spaces();
    triple.singular_values(u, from, to)
}

/// `||(s_n)||_{ℓ^p}`, `p >= 1`.
pub fn schatten_norm(values: &[f64], p: f64) -> Result<f64> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::POutOfRange(p));
    }
    // Scale by the largest value to keep s^p in range.
    let top = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if top == 0.0 {
        return Ok(0.0);
    }
    let sum: f64 = values.iter().map(|v| (v.abs() / top).powf(p)).sum();
    Ok(top * sum.powf(1.0 / p))
}

pub fn schatten_norm_matrix(
    triple: &GelfandTriple,
    m: &DMatrix<f64>,
    geometry: Geometry,
    p: f64,
) -> Result<f64> {
    let (from, to) = geometry.spaces();
    schatten_norm(&triple.singular_values(m, from, to)?, p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsRow {
    pub n: usize,
    pub dim: usize,
    /// `(p, ||U(t,s)||_{S_p(H)})`.
    pub schatten: Vec<(f64, f64)>,
    /// `Σ_k s_k` of the embedding `V → H`.
    pub embedding_s1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsStudy {
    pub t: f64,
    pub s: f64,
    pub rows: Vec<GibbsRow>,
    /// Relative change of each `S_p` norm between the top two dims.
    pub top_change: Vec<(f64, f64)>,
    /// Relative growth of the embedding `S_1` sum over the last doubling.
    pub embedding_growth: f64,
    pub s1_threshold: f64,
    pub growth_threshold: f64,
    pub gibbs_consistent: bool,
}

/// `U(t, s)` by extrapolated Crank–Nicolson on a graded mesh.
pub fn propagator(form: &NonAutonomousForm, t: f64, s: f64, mesh: &MeshSpec) -> Result<DMatrix<f64>> {
    if !(t > s) {
        return Err(Error::Invalid(format!("need t > s, got t = {t}, s = {s}")));
    }
    let n = form.dim();
    let nodes = mesh.build(form.horizon(), s, t, &[], form.singular_times());
    let traj = step_solve_extrapolated(
        form,
        s,
        &DMatrix::identity(n, n),
        &nodes,
        Scheme::CrankNicolson,
        None,
    )?;
    Ok(traj.last().clone())
}

/// For each `n` in `dims`, builds the form, computes `U(t, s)` and records
/// its Schatten norms in `H`. Consistent when the `S_1` norm moves less than
/// 2% between the two finest dims while the embedding's `S_1` sum grows more
/// than 25% over the last doubling.
pub fn gibbs_refinement_study(
    generator: impl Fn(usize) -> Result<NonAutonomousForm> + Sync,
    dims: &[usize],
    t: f64,
    s: f64,
    p_list: &[f64],
    mesh: &MeshSpec,
) -> Result<GibbsStudy> {
    if dims.len() < 2 || dims.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("dims must be strictly increasing, at least two".into()));
    }
    if !p_list.contains(&1.0) {
        return Err(Error::Invalid("p-list must include 1".into()));
    }
    for &p in p_list {
        schatten_norm(&[], p)?;
    }
    let rows: Vec<GibbsRow> = dims
        .iter()
        .map(|&n| -> Result<GibbsRow> {
            let form = generator(n)?;
            let u = propagator(&form, t, s, mesh)?;
            let sv = form.triple().singular_values(&u, Space::H, Space::H)?;
            let schatten = p_list
                .iter()
                .map(|&p| Ok((p, schatten_norm(&sv, p)?)))
                .collect::<Result<_>>()?;
            Ok(GibbsRow {
                n,
                dim: form.dim(),
                schatten,
                embedding_s1: form.triple().embedding_singular_values().iter().sum(),
            })
        })
        .collect::<Result<_>>()?;
    let (a, b) = (&rows[rows.len() - 2], &rows[rows.len() - 1]);
    let top_change: Vec<(f64, f64)> = a
        .schatten
        .iter()
        .zip(&b.schatten)
        .map(|(&(p, x), &(_, y))| (p, (y - x).abs() / x.abs().max(f64::MIN_POSITIVE)))
        .collect();
    let doublings = (b.n as f64 / a.n as f64).log2();
    let embedding_growth = (b.embedding_s1 / a.embedding_s1).powf(1.0 / doublings) - 1.0;
    let s1_change = top_change.iter().find(|(p, _)| *p == 1.0).map_or(f64::NAN, |x| x.1);
    let (s1_threshold, growth_threshold) = (0.02, 0.25);
    Ok(GibbsStudy {
        t,
        s,
        rows,
        top_change,
        embedding_growth,
        s1_threshold,
        growth_threshold,
        gibbs_consistent: s1_change < s1_threshold && embedding_growth > growth_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvProfile {
    pub t: f64,
    pub s: f64,
    pub geometry: Geometry,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityFlags {
    /// Both moduli decrease with `δ` and end below the threshold.
    pub norm_continuous_v: bool,
    pub norm_continuous_h: bool,
    /// `S_q <= S_p` for `p <= q` on every profile.
    pub schatten_monotone: bool,
    pub gibbs_consistent: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub modulus_v: ModulusScan,
    pub modulus_h: ModulusScan,
    pub modulus_second_arg: ModulusScan,
    pub sv_profiles: Vec<SvProfile>,
    /// `(p, ||U(t,s)||_{S_p(H)})` for the first profile pair.
    pub schatten: Vec<(f64, f64)>,
    pub trace_norm_refinement: Option<GibbsStudy>,
    pub continuity_threshold: f64,
    pub flags: RegularityFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityOptions {
    pub levels: usize,
    pub min_separation: f64,
    pub continuity_threshold: f64,
    pub p_list: Vec<f64>,
    /// `(i, j)` grid indices of the profiled entries.
    pub profile_pairs: Vec<(usize, usize)>,
}

impl Default for RegularityOptions {
    fn default() -> Self {
        RegularityOptions {
            levels: 5,
            min_separation: 0.1,
            continuity_threshold: 1e-3,
            p_list: vec![1.0, 1.5, 2.0],
            profile_pairs: Vec::new(),
        }
    }
}

/// Scans and profiles on a full table with a uniform grid. Moduli are taken
/// at `s = t_0` (first argument) and `t = t_last` (second argument).
pub fn regularity_report(
    table: &EvolutionTable,
    triple: &GelfandTriple,
    omega: Option<&DiniModulus>,
    opts: &RegularityOptions,
) -> Result<RegularityReport> {
    let grid = &table.grid;
    let gap = grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let deltas = dyadic_deltas(gap, opts.levels);
    let last = grid.len() - 1;
    let scan = |space, variation, anchor| {
        norm_continuity_scan(table, triple, space, variation, anchor, &deltas, opts.min_separation, omega)
    };
    let modulus_v = scan(Space::V, Variation::FirstArgument, 0)?;
    let modulus_h = scan(Space::H, Variation::FirstArgument, 0)?;
    let modulus_second_arg = scan(Space::V, Variation::SecondArgument, last)?;
    let pairs = if opts.profile_pairs.is_empty() {
        // The pair closest to t - s = min_separation from t_0, and (T, t_0).
        let k = grid
            .iter()
            .position(|&t| t - grid[0] >= opts.min_separation - 1e-12)
            .unwrap_or(last)
            .max(1);
        let mut v = vec![(k, 0)];
        if k != last {
            v.push((last, 0));
        }
        v
    } else {
        opts.profile_pairs.clone()
    };
    let mut sv_profiles = Vec::new();
    for &(i, j) in &pairs {
        for geometry in [Geometry::HH, Geometry::VV, Geometry::HV] {
            sv_profiles.push(SvProfile {
                t: grid[i],
                s: grid[j],
                geometry,
                values: singular_value_profile(table, triple, i, j, geometry)?,
            });
        }
    }
    let schatten = opts
        .p_list
        .iter()
        .map(|&p| Ok((p, schatten_norm(&sv_profiles[0].values, p)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut ps = opts.p_list.clone();
    ps.sort_by(f64::total_cmp);
    let mut schatten_monotone = true;
    for prof in &sv_profiles {
        let norms: Vec<f64> = ps
            .iter()
            .map(|&p| schatten_norm(&prof.values, p))
            .collect::<Result<_>>()?;
        schatten_monotone &= norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    }
    let finest_ok = |m: &ModulusScan| {
        let k = m
            .deltas
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        m.monotone && m.values[k] < opts.continuity_threshold
    };
    let flags = RegularityFlags {
        norm_continuous_v: finest_ok(&modulus_v),
        norm_continuous_h: finest_ok(&modulus_h),
        schatten_monotone,
        gibbs_consistent: None,
    };
    Ok(RegularityReport {
        modulus_v,
        modulus_h,
        modulus_second_arg,
        sv_profiles,
        schatten,
        trace_norm_refinement: None,
        continuity_threshold: opts.continuity_threshold,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::{build_table, CertifiedForm, Method, TableOptions};
    use std::sync::Arc;

    #[test]
    fn schatten_examples() {
        assert!((schatten_norm(&[3.0, 4.0], 2.0).unwrap() - 5.0).abs() < 1e-15);
        assert!((schatten_norm(&[3.0, 4.0], 1.0).unwrap() - 7.0).abs() < 1e-15);
        assert!(matches!(schatten_norm(&[1.0], 0.5), Err(Error::POutOfRange(_))));
    }

    #[test]
    fn scalar_modulus_matches_closed_form() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let triple = Arc::new(GelfandTriple::new(one.clone(), one).unwrap());
        let a = 2.0;
        let f = NonAutonomousForm::autonomous(triple.clone(), 1.0, 0.0, DMatrix::from_element(1, 1, a)).unwrap();
        let grid: Vec<f64> = (0..=32).map(|k| k as f64 / 32.0).collect();
        let opts = TableOptions {
            columns: Some(vec![0]),
            ..TableOptions::default()
        };
        let t = build_table(&CertifiedForm::uncertified(f), &grid, Method::Stepper, &opts).unwrap();
        let deltas = dyadic_deltas(1.0 / 32.0, 3);
        let m = norm_continuity_scan(&t, &triple, Space::H, Variation::FirstArgument, 0, &deltas, 0.25, None).unwrap();
        for (d, v) in m.deltas.iter().zip(&m.values) {
            // The max sits at the smallest admissible t - s.
            let want = (-a * 0.25f64).exp() * (1.0 - (-a * d).exp());
            assert!((v - want).abs() < 1e-9, "δ {d}: {v} vs {want}");
        }
        assert!(m.monotone);
        assert!(matches!(
            norm_continuity_scan(&t, &triple, Space::H, Variation::FirstArgument, 0, &[1e-3], 0.25, None),
            Err(Error::GridTooCoarse(_))
        ));
    }

    #[test]
    fn identity_profile_is_ones() {
        let triple = GelfandTriple::new(DMatrix::identity(3, 3), DMatrix::from_diagonal(&nalgebra::dvector![1.0, 4.0, 9.0])).unwrap();
        let sv = triple.singular_values(&DMatrix::<f64>::identity(3, 3), Space::H, Space::H).unwrap();
        assert!(sv.iter().all(|s| (s - 1.0).abs() < 1e-14));
    }
}
