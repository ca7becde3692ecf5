//! One function per subcommand. Each writes its files under the output
//! directory and returns the flags it checked.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use evolab::calculus::{
    resolvent_estimate_suite, sqrt_holder_suite, square_root_property_check, FrozenOperator, SqrtHolderReport,
    SuitePlan,
};
use evolab::evolution::{
    build_table, compare_tables, contractivity_energy_check, evolution_law_residual, p_norm_and_shift,
    CertifiedForm, EnergyReport, EvolutionTable, MeshSpec, Method, NeumannOptions, ShiftOptions, TableOptions,
    TableStats,
};
use evolab::form::{
    coercivity_shift, dyadic_lags, estimate_bounds, estimate_dini_modulus, uniform_times, verify_dini,
    DiniModulus, DiniReport, FormBounds, DEFAULT_EPSILONS,
};
use evolab::problem::FormSpec;
use evolab::regularity::{gibbs_refinement_study, regularity_report, GibbsStudy, RegularityOptions, RegularityReport};
use evolab::report::{fmt_num, write_json, Csv};
use evolab::robin::{holder_pairs, robin_form, run_pipeline, scan_table, PipelineConfig, RobinProblem};
use evolab::{Error, GelfandTriple, NonAutonomousForm, Result, Space};
use serde::Serialize;

use crate::config::{ExperimentConfig, Stage};

/// Checked properties by name; `None` when not applicable.
pub type Flags = BTreeMap<String, Option<bool>>;

pub struct Ctx {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.path(name), value)?;
        println!("wrote {}", self.path(name).display());
        Ok(())
    }

    fn write_csv(&self, name: &str, csv: &Csv) -> Result<()> {
        csv.write(&self.path(name))?;
        println!("wrote {}", self.path(name).display());
        Ok(())
    }

    fn spec(&self) -> Result<FormSpec> {
        self.cfg.form_spec()
    }

    fn table_options(&self) -> TableOptions {
        let g = &self.cfg.grid;
        let base = TableOptions::default();
        TableOptions {
            stepper_mesh: MeshSpec {
                base_steps: g.stepper_steps,
                ..base.stepper_mesh
            },
            neumann: NeumannOptions {
                tol: self.cfg.tolerances.neumann,
                mesh: self.neumann_mesh(),
                ..base.neumann
            },
            ..base
        }
    }

    fn neumann_mesh(&self) -> MeshSpec {
        MeshSpec {
            base_steps: self.cfg.grid.neumann_steps,
            ..NeumannOptions::default().mesh
        }
    }

    fn shift_options(&self) -> ShiftOptions {
        ShiftOptions {
            seed: self.cfg.seed,
            mesh: self.neumann_mesh(),
            ..ShiftOptions::default()
        }
    }

    fn regularity_options(&self) -> RegularityOptions {
        RegularityOptions {
            levels: self.cfg.grid.scan_levels,
            min_separation: self.cfg.grid.min_separation,
            continuity_threshold: self.cfg.tolerances.continuity,
            p_list: self.cfg.p_list.clone(),
            profile_pairs: Vec::new(),
        }
    }

    fn table_grid(&self, horizon: f64) -> Vec<f64> {
        uniform_times(horizon, self.cfg.grid.table_intervals + 1)
    }
}

fn flag(flags: &mut Flags, name: &str, value: impl Into<Option<bool>>) {
    flags.insert(name.to_string(), value.into());
}

/// No flag is false.
pub fn all_pass(flags: &Flags) -> bool {
    flags.values().all(|f| f.unwrap_or(true))
}

#[derive(Serialize)]
struct BoundsFile<'a> {
    problem: &'a FormSpec,
    bounds: FormBounds,
    /// Smallest `μ` making the shifted form coercive on the samples.
    coercivity_shift: f64,
    modulus: &'a DiniModulus,
    dini: DiniReport,
    flags: &'a Flags,
}

/// Bounds and modulus on the sample grid; the gate result is recorded before
/// it is enforced.
fn bounds_stage(ctx: &Ctx, spec: &FormSpec, form: &NonAutonomousForm) -> Result<(DiniModulus, Flags)> {
    let g = &ctx.cfg.grid;
    let samples = uniform_times(form.horizon(), g.samples);
    let bounds = estimate_bounds(form, &samples)?;
    let mu = coercivity_shift(form, &samples)?;
    let modulus = estimate_dini_modulus(form, &dyadic_lags(form.horizon(), g.dini_levels), &samples)?;
    let dini = verify_dini(&modulus, &DEFAULT_EPSILONS);
    let mut flags = Flags::new();
    flag(&mut flags, "coercive", bounds.alpha > 0.0);
    flag(&mut flags, "dini_gate", modulus.gate().is_ok());
    ctx.write_json(
        Stage::Bounds.file(),
        &BoundsFile {
            problem: spec,
            bounds,
            coercivity_shift: mu,
            modulus: &modulus,
            dini,
            flags: &flags,
        },
    )?;
    Ok((modulus, flags))
}

pub fn bounds(ctx: &Ctx) -> Result<Flags> {
    let spec = ctx.spec()?;
    let form = spec.build()?;
    let (modulus, flags) = bounds_stage(ctx, &spec, &form)?;
    modulus.gate()?;
    Ok(flags)
}

/// `max_k ||U(t_i, t_k) U(t_k, t_j) - U(t_i, t_j)||_{L(H)}` per entry, over
/// the intermediate nodes the table holds.
fn law_residuals(table: &EvolutionTable, triple: &GelfandTriple) -> Result<BTreeMap<(usize, usize), f64>> {
    let mut out = BTreeMap::new();
    for (&(i, j), u) in &table.entries {
        let mut worst = 0.0f64;
        for k in j + 1..i {
            if let (Some(a), Some(b)) = (table.get(i, k), table.get(k, j)) {
                worst = worst.max(triple.operator_norm(&(a * b - u), Space::H, Space::H)?);
            }
        }
        out.insert((i, j), worst);
    }
    Ok(out)
}

/// Per-pair norms of the unshifted family of `primary`, with the law residual
/// and, given a second table, the distance between the two.
fn pairs_csv(primary: &EvolutionTable, other: Option<&EvolutionTable>, triple: &GelfandTriple) -> Result<Csv> {
    let u = primary.unshifted();
    let w = other.map(EvolutionTable::unshifted);
    let norms = u.pair_norms(triple)?;
    let law = law_residuals(&u, triple)?;
    let mut csv = Csv::new(&[
        "i",
        "j",
        "t_i[time]",
        "t_j[time]",
        "opnorm_H[L(H) via gram_H]",
        "opnorm_V[L(V) via gram_V]",
        "law_residual_H[L(H) via gram_H]",
        "agreement_H[L(H) via gram_H]",
    ]);
    for (i, j, h, v) in norms {
        let agree = match w.as_ref().and_then(|w| w.get(i, j)) {
            Some(b) => triple.operator_norm(&(&u.entries[&(i, j)] - b), Space::H, Space::H)?,
            None => f64::NAN,
        };
        csv.push(vec![
            i.to_string(),
            j.to_string(),
            fmt_num(u.grid[i]),
            fmt_num(u.grid[j]),
            fmt_num(h),
            fmt_num(v),
            fmt_num(law[&(i, j)]),
            fmt_num(agree),
        ]);
    }
    Ok(csv)
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Stepper => "stepper",
        Method::Neumann => "neumann",
    }
}

#[derive(Serialize)]
struct TableReport {
    method: Method,
    file: String,
    stats: TableStats,
    law_residual: f64,
}

#[derive(Serialize)]
struct EvolveFile<'a> {
    certificate: evolab::evolution::CertificateSummary,
    shifted_bounds: FormBounds,
    grid: &'a [f64],
    tables: Vec<TableReport>,
    /// Largest `||U_a - U_b||_{L(H)}` over shared pairs, absolute and relative.
    agreement: Option<(f64, f64)>,
    energy: EnergyReport,
    flags: &'a Flags,
}

pub fn evolve(ctx: &Ctx) -> Result<Flags> {
    let spec = ctx.spec()?;
    let form = spec.build()?;
    let (modulus, _) = bounds_stage(ctx, &spec, &form)?;
    modulus.gate()?;
    let cert = p_norm_and_shift(&form, &ctx.shift_options())?;
    let triple = form.triple().clone();
    let grid = ctx.table_grid(form.horizon());
    let opts = ctx.table_options();
    let mut tables = Vec::new();
    for &m in &ctx.cfg.methods {
        tables.push(build_table(&cert, &grid, m, &opts)?);
    }
    let tol = &ctx.cfg.tolerances;
    let mut reports = Vec::new();
    let mut worst_law = 0.0f64;
    for (k, t) in tables.iter().enumerate() {
        let file = if k == 0 {
            "table.json".to_string()
        } else {
            format!("table_{}.json", method_name(t.method))
        };
        evolab::report::write_atomic(&ctx.path(&file), t.to_json()?.as_bytes())?;
        println!("wrote {}", ctx.path(&file).display());
        let law = evolution_law_residual(t, &triple)?;
        worst_law = worst_law.max(law);
        reports.push(TableReport {
            method: t.method,
            file,
            stats: t.stats.clone(),
            law_residual: law,
        });
    }
    let agreement = match tables.get(1) {
        Some(b) => Some(compare_tables(&tables[0], b, &triple)?),
        None => None,
    };
    let shifted_bounds = estimate_bounds(&cert.form, &uniform_times(form.horizon(), ctx.cfg.grid.samples))?;
    let energy = contractivity_energy_check(&tables[0], &triple, shifted_bounds.alpha, tol.contractivity)?;
    ctx.write_csv("pairs.csv", &pairs_csv(&tables[0], tables.get(1), &triple)?)?;

    let mut flags = Flags::new();
    flag(&mut flags, "certified", cert.is_certified());
    let neumann = tables.iter().find(|t| t.method == Method::Neumann);
    flag(
        &mut flags,
        "increments_within_certificate",
        neumann.map(|t| t.stats.max_ratio <= cert.estimate + 0.05),
    );
    flag(&mut flags, "evolution_law", worst_law <= tol.law);
    flag(&mut flags, "tables_agree", agreement.map(|a| a.0 <= tol.agreement));
    flag(&mut flags, "contractive", energy.contractive);
    ctx.write_json(
        Stage::Evolve.file(),
        &EvolveFile {
            certificate: cert.summary(),
            shifted_bounds,
            grid: &grid,
            tables: reports,
            agreement,
            energy,
            flags: &flags,
        },
    )?;
    Ok(flags)
}

#[derive(Serialize)]
struct SuiteFile {
    sigma: f64,
    kappa: f64,
    c0: f64,
    sqrt_holder: SqrtHolderReport,
}

#[derive(Serialize)]
struct RegularityFile<'a> {
    shift: f64,
    modulus: &'a DiniModulus,
    regularity: &'a RegularityReport,
    suites: Option<SuiteFile>,
    flags: &'a Flags,
}

const HOLDER_LABELS: [&str; 3] = [
    "c0 |A^{-1/2}(t)-A^{-1/2}(s)|_{V'->H}/w",
    "c0 |A^{-1/2}(t)-A^{-1/2}(s)|_{H->V}/w",
    "c0 |A^{1/2}(t)-A^{1/2}(s)|_{V->H}/w",
];

fn write_plotdata(ctx: &Ctx, reg: &RegularityReport, modulus: &DiniModulus) -> Result<()> {
    for (name, scan) in [
        ("modulus_v", &reg.modulus_v),
        ("modulus_h", &reg.modulus_h),
        ("modulus_second_arg", &reg.modulus_second_arg),
    ] {
        let mut csv = Csv::new(&["delta[time]".to_string(), format!("modulus[L({}) opnorm]", scan.space)]);
        let mut rows: Vec<(f64, f64)> = scan.deltas.iter().copied().zip(scan.values.iter().copied()).collect();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (d, v) in rows {
            csv.push(vec![fmt_num(d), fmt_num(v)]);
        }
        ctx.write_csv(&format!("plotdata/{name}.csv"), &csv)?;
    }
    let mut csv = Csv::new(&["lag[time]", "omega[L(V->V'_gamma) via gram_V]"]);
    for (l, v) in modulus.lags.iter().zip(&modulus.values) {
        csv.push(vec![fmt_num(*l), fmt_num(*v)]);
    }
    ctx.write_csv("plotdata/dini_modulus.csv", &csv)?;
    let mut csv = Csv::new(&["t[time]", "s[time]", "geometry[from->to]", "index", "singular_value"]);
    for p in &reg.sv_profiles {
        let (from, to) = p.geometry.spaces();
        for (k, v) in p.values.iter().enumerate() {
            csv.push(vec![
                fmt_num(p.t),
                fmt_num(p.s),
                format!("{}->{}", from.label(), to.label()),
                k.to_string(),
                fmt_num(*v),
            ]);
        }
    }
    ctx.write_csv("plotdata/sv_profiles.csv", &csv)?;
    let mut csv = Csv::new(&["p", "schatten_norm[S_p of U(t,s) on H via gram_H]"]);
    for (p, v) in &reg.schatten {
        csv.push(vec![fmt_num(*p), fmt_num(*v)]);
    }
    ctx.write_csv("plotdata/schatten.csv", &csv)?;
    if let Some(g) = &reg.trace_norm_refinement {
        ctx.write_csv("plotdata/gibbs.csv", &gibbs_csv(g))?;
    }
    Ok(())
}

fn gibbs_csv(g: &GibbsStudy) -> Csv {
    let mut header = vec!["n".to_string(), "dim".to_string(), "embedding_S1[V->H]".to_string()];
    if let Some(r) = g.rows.first() {
        header.extend(r.schatten.iter().map(|(p, _)| format!("S_{p}[U(t,s) on H]")));
    }
    let mut csv = Csv::new(&header);
    for r in &g.rows {
        let mut row = vec![r.n.to_string(), r.dim.to_string(), fmt_num(r.embedding_s1)];
        row.extend(r.schatten.iter().map(|(_, v)| fmt_num(*v)));
        csv.push(row);
    }
    csv
}

/// Resolvent suite rows, then `σ̂` and the three Hölder ratios.
fn suites_csv(res: &evolab::calculus::EstimateSuiteReport, suite: &SuiteFile) -> Csv {
    let mut csv = res.to_csv();
    let nan = fmt_num(f64::NAN);
    let mut id = res.items.len();
    let mut extra = |label: &str, v: f64| {
        id += 1;
        csv.push(vec![id.to_string(), label.to_string(), fmt_num(v), nan.clone(), nan.clone(), nan.clone()]);
    };
    extra("sigma |A^{1/2}u|_H/|u|_V", suite.sigma);
    extra("kappa |A^{-1/2}|_{V'->H}", suite.kappa);
    extra("c0 |A^{-1/2}|_{V->V}", suite.c0);
    for (label, v) in HOLDER_LABELS.iter().zip(suite.sqrt_holder.max_ratios) {
        extra(label, v);
    }
    csv
}

fn suites(form: &NonAutonomousForm, modulus: &DiniModulus, refine: usize) -> Result<(evolab::calculus::EstimateSuiteReport, SuiteFile)> {
    let psi = FrozenOperator::of_form(form, 0.0)?.sector_angle();
    let res = resolvent_estimate_suite(form, &SuitePlan::standard(psi, form.horizon(), refine))?;
    let sigma = square_root_property_check(form, &uniform_times(form.horizon(), 3))?;
    let sqrt_holder = sqrt_holder_suite(form, &holder_pairs(form.horizon()), modulus)?;
    let file = SuiteFile {
        sigma,
        kappa: res.kappa,
        c0: res.c0,
        sqrt_holder,
    };
    Ok((res, file))
}

fn load_table(ctx: &Ctx) -> Result<EvolutionTable> {
    let path = ctx.path("table.json");
    if !path.exists() {
        return Err(Error::Invalid(format!(
            "verify depends on the evolve stage: {} not found; run `evolab evolve` with this config first",
            path.display()
        )));
    }
    EvolutionTable::load_json(&path)
}

pub fn verify(ctx: &Ctx) -> Result<Flags> {
    let spec = ctx.spec()?;
    let table = load_table(ctx)?;
    let form = spec.build()?;
    if table.dim != form.dim() || table.grid.last().is_none_or(|&t| (t - form.horizon()).abs() > 1e-12) {
        return Err(Error::Invalid(format!(
            "{} was produced for another problem (dim {}, horizon {:?})",
            ctx.path("table.json").display(),
            table.dim,
            table.grid.last()
        )));
    }
    let g = &ctx.cfg.grid;
    let samples = uniform_times(form.horizon(), g.samples);
    let modulus = estimate_dini_modulus(&form, &dyadic_lags(form.horizon(), g.dini_levels), &samples)?;
    modulus.gate()?;
    // The scans run on the family the table was certified for.
    let shifted = CertifiedForm::uncertified(form.shifted(table.shift));
    let reg_opts = ctx.regularity_options();
    let scan = scan_table(&shifted, g.table_intervals, g.scan_depth, &reg_opts, &ctx.table_options())?;
    let mut reg = regularity_report(&scan, form.triple(), Some(&modulus), &reg_opts)?;
    if let (Some(dims), Some(p)) = (&ctx.cfg.gibbs_dims, spec.robin()) {
        reg.trace_norm_refinement = Some(gibbs(p, dims, ctx)?);
        reg.flags.gibbs_consistent = reg.trace_norm_refinement.as_ref().map(|s| s.gibbs_consistent);
    }
    let suite = if ctx.cfg.suites {
        let (res, file) = suites(&form, &modulus, g.suite_refine)?;
        ctx.write_csv("suites.csv", &suites_csv(&res, &file))?;
        Some((res.all_finite(), file))
    } else {
        None
    };
    write_plotdata(ctx, &reg, &modulus)?;
    let mut flags = Flags::new();
    flag(&mut flags, "norm_continuous_v", reg.flags.norm_continuous_v);
    flag(&mut flags, "norm_continuous_h", reg.flags.norm_continuous_h);
    flag(&mut flags, "schatten_monotone", reg.flags.schatten_monotone);
    flag(&mut flags, "gibbs_consistent", reg.flags.gibbs_consistent);
    flag(
        &mut flags,
        "suites_finite",
        suite.as_ref().map(|(finite, f)| {
            *finite && f.sigma.is_finite() && f.sqrt_holder.max_ratios.iter().all(|r| r.is_finite())
        }),
    );
    ctx.write_json(
        Stage::Verify.file(),
        &RegularityFile {
            shift: table.shift,
            modulus: &modulus,
            regularity: &reg,
            suites: suite.map(|s| s.1),
            flags: &flags,
        },
    )?;
    Ok(flags)
}

fn gibbs(p: &RobinProblem, dims: &[usize], ctx: &Ctx) -> Result<GibbsStudy> {
    let mesh = ctx.table_options().stepper_mesh;
    gibbs_refinement_study(
        |n| robin_form(&RobinProblem { n, ..p.clone() }),
        dims,
        ctx.cfg.gibbs_separation,
        0.0,
        &ctx.cfg.p_list,
        &mesh,
    )
}

pub fn robin(ctx: &Ctx) -> Result<Flags> {
    let spec = ctx.spec()?;
    let problem = spec
        .robin()
        .ok_or_else(|| Error::Invalid("the robin command needs a robin1d problem".into()))?;
    let defaults = PipelineConfig::default();
    let tol = &ctx.cfg.tolerances;
    let config = PipelineConfig {
        table_intervals: ctx.cfg.grid.table_intervals,
        shift: ctx.shift_options(),
        table: ctx.table_options(),
        regularity: ctx.regularity_options(),
        scan_depth: ctx.cfg.grid.scan_depth,
        gibbs_dims: ctx.cfg.gibbs_dims.clone().unwrap_or(defaults.gibbs_dims),
        gibbs_separation: ctx.cfg.gibbs_separation,
        suites: ctx.cfg.suites,
        agreement_tol: tol.agreement,
        law_tol: tol.law,
        contractivity_tol: tol.contractivity,
    };
    let out = run_pipeline(problem, &config)?;
    let rep = &out.report;
    let form = robin_form(problem)?;
    ctx.write_csv("pairs.csv", &pairs_csv(&out.neumann, Some(&out.stepper), form.triple())?)?;
    for (file, t) in [("table.json", &out.neumann), ("table_stepper.json", &out.stepper)] {
        evolab::report::write_atomic(&ctx.path(file), t.to_json()?.as_bytes())?;
        println!("wrote {}", ctx.path(file).display());
    }
    write_plotdata(ctx, &rep.regularity, &out.modulus)?;
    if let Some(s) = &rep.suites {
        let file = SuiteFile {
            sigma: s.sigma,
            kappa: s.resolvent.kappa,
            c0: s.resolvent.c0,
            sqrt_holder: s.sqrt_holder.clone(),
        };
        ctx.write_csv("suites.csv", &suites_csv(&s.resolvent, &file))?;
    }
    ctx.write_json(Stage::Robin.file(), rep)?;
    let f = &rep.flags;
    let mut flags = Flags::new();
    for (name, v) in [
        ("dini_gate", Some(f.dini_gate)),
        ("certified", Some(f.certified)),
        ("increments_within_certificate", Some(f.increments_within_certificate)),
        ("tables_agree", Some(f.tables_agree)),
        ("evolution_law", Some(f.evolution_law)),
        ("contractive", Some(f.contractive)),
        ("energy_inequality", Some(f.energy_inequality)),
        ("norm_continuous_v", Some(f.norm_continuous_v)),
        ("norm_continuous_h", Some(f.norm_continuous_h)),
        ("schatten_monotone", Some(f.schatten_monotone)),
        ("gibbs_consistent", f.gibbs_consistent),
        ("suites_finite", f.suites_finite),
    ] {
        flag(&mut flags, name, v);
    }
    report_from(&ctx.out, &[])?;
    Ok(flags)
}

#[derive(Serialize)]
struct Summary {
    stages: BTreeMap<String, Flags>,
    all_pass: bool,
}

fn read_flags(path: &Path) -> Result<Flags> {
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let mut flags = Flags::new();
    if let Some(map) = value.get("flags").and_then(|f| f.as_object()) {
        for (k, v) in map {
            flags.insert(k.clone(), v.as_bool());
        }
    }
    Ok(flags)
}

/// Collects the flags of every stage file present into `summary.json`.
fn report_from(out: &Path, required: &[Stage]) -> Result<Flags> {
    for &s in required {
        if !out.join(s.file()).exists() {
            return Err(Error::Invalid(format!(
                "report requires {} from the {} stage; run `evolab {}` first",
                s.file(),
                stage_name(s),
                stage_name(s)
            )));
        }
    }
    let mut stages = BTreeMap::new();
    let mut merged = Flags::new();
    for s in [Stage::Bounds, Stage::Evolve, Stage::Verify, Stage::Robin] {
        let path = out.join(s.file());
        if !path.exists() {
            continue;
        }
        let flags = read_flags(&path)?;
        for (k, v) in &flags {
            merged.insert(format!("{}.{k}", stage_name(s)), *v);
        }
        stages.insert(stage_name(s).to_string(), flags);
    }
    if stages.is_empty() {
        return Err(Error::Invalid(format!("no stage outputs in {}", out.display())));
    }
    let summary = Summary {
        all_pass: all_pass(&merged),
        stages,
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!("wrote {}", out.join("summary.json").display());
    Ok(merged)
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Bounds => "bounds",
        Stage::Evolve => "evolve",
        Stage::Verify => "verify",
        Stage::Robin => "robin",
    }
}

pub fn report(out: &Path, required: &[Stage]) -> Result<Flags> {
    let flags = report_from(out, required)?;
    for (k, v) in &flags {
        let word = match v {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "n/a",
        };
        println!("{k:<44} {word}");
    }
    Ok(flags)
}
