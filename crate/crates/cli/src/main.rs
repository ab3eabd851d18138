mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mlcausal::diagnostics;
use mlcausal::mcmc::SamplerSettings;
use mlcausal::pipeline::{
    self, GatePolicy, OutcomeModelKind, PipelineSettings, PropensityEstimate, PropensityModelKind,
    PsPoint, StageFit,
};
use mlcausal::sim::{self, BinarySimConfig, LinearGridSpec};
use mlcausal::tb::{self, CohortSpec, ColumnMap};
use mlcausal::{Dataset, PriorSpec};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "mlcausal",
    version,
    about = "Propensity-score causal inference with cluster-level confounding"
)]
struct Cli {
    /// Flat `key = value` file mirroring long flag names; flags on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "MLCAUSAL_OUT_DIR", default_value = ".")]
    out: PathBuf,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytic bias/RMSE grid for the linear-Gaussian study.
    SimulateLinear(SimulateLinear),
    /// Binary exposure/outcome replicate study with MD1..MD4.
    SimulateBinary(SimulateBinary),
    /// Two-step fit of one outcome model on the TB data.
    Fit(Fit),
    /// Covariate balance (SMD) under propensity models.
    Balance(Balance),
    /// WAIC/LOO comparison of propensity or outcome models.
    Compare(Compare),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    Paper,
    Desk,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Gate {
    Enforce,
    Warn,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PsPointArg {
    /// expit at posterior-mean parameters.
    Params,
    /// posterior mean of expit.
    Score,
}

#[derive(Args, Debug, Clone)]
struct McmcArgs {
    #[arg(long)]
    chains: Option<usize>,
    /// Iterations per chain including warmup.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    rhat_threshold: Option<f64>,
}

impl McmcArgs {
    fn settings(&self, base: SamplerSettings, seed: u64) -> SamplerSettings {
        SamplerSettings {
            chains: self.chains.unwrap_or(base.chains),
            iterations: self.iterations.unwrap_or(base.iterations),
            warmup: self.warmup.unwrap_or(base.warmup),
            rhat_threshold: self.rhat_threshold.unwrap_or(base.rhat_threshold),
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct SimulateLinear {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    m: Option<usize>,
    /// Units per cluster, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// σ² values used for both σT² and σW², comma separated.
    #[arg(long, value_delimiter = ',')]
    sigma2: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    rho: Option<Vec<f64>>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    mu_t: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu_w: Option<f64>,
    /// Fit the outcome regressions without an intercept.
    #[arg(long)]
    zero_intercept: bool,
}

#[derive(Args, Debug)]
struct SimulateBinary {
    /// desk: 100 replicates, 2 chains × 1000 iterations (400 warmup);
    /// paper: 1000 replicates, 2 × 1500 (500 warmup).
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    x_scenario: u8,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    tw_case: u8,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    mu_t: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    mu_w: Option<f64>,
    #[command(flatten)]
    mcmc: McmcArgs,
}

#[derive(Args, Debug)]
struct TbArgs {
    /// Delimited TB notification file.
    #[arg(long)]
    data: PathBuf,
    /// `city_id,x,y` centroid file (needed for spatial models).
    #[arg(long)]
    centroids: Option<PathBuf>,
    /// JSON object overriding source column names.
    #[arg(long)]
    column_map: Option<PathBuf>,
    /// Center and scale age and HDI.
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    min_age: Option<u32>,
}

#[derive(Args, Debug)]
struct FitCommon {
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    mcmc: McmcArgs,
    #[arg(long, value_enum, default_value = "enforce")]
    gate: Gate,
    #[arg(long, value_enum, default_value = "params")]
    ps_point: PsPointArg,
}

impl FitCommon {
    fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            mcmc: self.mcmc.settings(SamplerSettings::default(), self.seed),
            priors: PriorSpec::default(),
            gate: match self.gate {
                Gate::Enforce => GatePolicy::Enforce,
                Gate::Warn => GatePolicy::Report,
            },
            ps_point: match self.ps_point {
                PsPointArg::Params => PsPoint::ParameterMean,
                PsPointArg::Score => PsPoint::ScoreMean,
            },
            outcome_prior_overrides: Vec::new(),
        }
    }
}

#[derive(Args, Debug)]
struct Fit {
    #[command(flatten)]
    tb: TbArgs,
    /// Propensity model; implied by PS-adjusted outcome models.
    #[arg(long)]
    ps: Option<PropensityModelKind>,
    /// Outcome model, M1..M15.
    #[arg(long)]
    outcome: OutcomeModelKind,
    #[command(flatten)]
    common: FitCommon,
    /// Also write the outcome-model posterior draws as CSV.
    #[arg(long)]
    save_draws: bool,
}

#[derive(Args, Debug)]
struct Balance {
    #[command(flatten)]
    tb: TbArgs,
    #[arg(long, value_delimiter = ',', default_value = "PS1,PS2,PS3")]
    ps: Vec<PropensityModelKind>,
    #[command(flatten)]
    common: FitCommon,
}

#[derive(Args, Debug)]
struct Compare {
    #[command(flatten)]
    tb: TbArgs,
    /// Comma-separated PS1..PS3 and/or M1..M15.
    #[arg(long, value_delimiter = ',', required = true)]
    models: Vec<String>,
    #[command(flatten)]
    common: FitCommon,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<mlcausal::Error> for Failure {
    fn from(e: mlcausal::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

struct Output {
    dir: PathBuf,
    force: bool,
    written: Vec<String>,
}

impl Output {
    fn new(dir: &Path, force: bool) -> anyhow::Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            force,
            written: Vec::new(),
        })
    }

    /// Refuses up front to clobber any of `names`.
    fn claim(&self, names: &[String]) -> Outcome {
        if self.force {
            return Ok(());
        }
        for n in names {
            let p = self.dir.join(n);
            if p.exists() {
                return Err(Failure::Runtime(anyhow!(
                    "{} exists; pass --force to overwrite",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>,
    ) -> anyhow::Result<()> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        f(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &Value) -> anyhow::Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, v)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn manifest(
        &mut self,
        name: &str,
        subcommand: &str,
        seed: u64,
        config: Value,
    ) -> anyhow::Result<()> {
        let m = json!({
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "tool": "mlcausal",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "seed": seed,
            "config": config,
            "outputs": self.written.clone(),
        });
        self.json(name, &m)
    }
}

fn simulate_linear(a: &SimulateLinear, out: &mut Output) -> Outcome {
    let base = match a.preset {
        Preset::Paper => LinearGridSpec::paper(),
        Preset::Desk => LinearGridSpec::desk(),
    };
    let spec = LinearGridSpec {
        m: a.m.unwrap_or(base.m),
        n_set: a.n.clone().unwrap_or(base.n_set),
        sigma_grid: a.sigma2.clone().unwrap_or(base.sigma_grid),
        rho_set: a.rho.clone().unwrap_or(base.rho_set),
        replicates: a.replicates.unwrap_or(base.replicates),
        mu_t: a.mu_t.unwrap_or(base.mu_t),
        mu_w: a.mu_w.unwrap_or(base.mu_w),
        zero_intercept: a.zero_intercept,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (csv, manifest) = (
        "linear_grid.csv".to_string(),
        "linear_grid.manifest.json".to_string(),
    );
    out.claim(&[csv.clone(), manifest.clone()])?;
    let table = sim::run_linear_grid(&spec)?;
    out.write(&csv, |w| Ok(table.write_csv(w)?))?;
    out.manifest(
        &manifest,
        "simulate-linear",
        a.seed,
        serde_json::to_value(&spec).map_err(anyhow::Error::from)?,
    )?;
    Ok(())
}

fn simulate_binary(a: &SimulateBinary, out: &mut Output) -> Outcome {
    let (reps, budget) = match a.preset {
        Preset::Desk => (
            100,
            SamplerSettings {
                iterations: 1000,
                warmup: 400,
                ..Default::default()
            },
        ),
        Preset::Paper => (1000, SamplerSettings::default()),
    };
    let d = BinarySimConfig::default();
    let cfg = BinarySimConfig {
        m: a.m.unwrap_or(d.m),
        n: a.n.unwrap_or(d.n),
        x_scenario: a.x_scenario,
        tw_case: a.tw_case,
        mu_t: a.mu_t.unwrap_or(d.mu_t),
        mu_w: a.mu_w.unwrap_or(d.mu_w),
        replicates: a.replicates.unwrap_or(reps),
        seed: a.seed,
        mcmc: a.mcmc.settings(budget, a.seed),
        ..d
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let stem = format!("binary_s{}_c{}", cfg.x_scenario, cfg.tw_case);
    let names = [
        format!("{stem}.csv"),
        format!("{stem}.summary.json"),
        format!("{stem}.manifest.json"),
    ];
    out.claim(&names)?;
    let res = sim::run_binary_study(&cfg)?;
    out.write(&names[0], |w| Ok(res.write_csv(w)?))?;
    out.json(
        &names[1],
        &json!({ "models": res.models, "smd_exceedances": res.smd_exceedances }),
    )?;
    out.manifest(
        &names[2],
        "simulate-binary",
        a.seed,
        serde_json::to_value(&cfg).map_err(anyhow::Error::from)?,
    )?;
    Ok(())
}

struct TbData {
    dataset: Dataset,
    summary: Value,
}

fn load_tb(a: &TbArgs) -> Result<TbData, Failure> {
    let map = match &a.column_map {
        Some(p) => ColumnMap::from_json_file(p)?,
        None => ColumnMap::default(),
    };
    let report =
        tb::load(&a.data, &map).with_context(|| format!("loading {}", a.data.display()))?;
    let spec = CohortSpec {
        min_age: a.min_age.unwrap_or(11),
        standardize: a.standardize,
        ..Default::default()
    };
    let (mut ds, ledger) = tb::derive_cohort(&report.records, &spec)?;
    if let Some(p) = &a.centroids {
        let centroids =
            tb::load_centroids(p).with_context(|| format!("loading {}", p.display()))?;
        ds = tb::attach_geography(ds, &centroids)?;
    }
    let summary = json!({
        "data": a.data.display().to_string(),
        "rows_read": report.rows_read,
        "missing_required": report.missing_required,
        "exclusions": ledger,
        "n": ds.n(),
        "treated": ds.exposure.iter().filter(|&&z| z == 1.0).count(),
        "cured": ds.outcome.iter().filter(|&&y| y == 1.0).count(),
        "clusters": ds.m(),
    });
    Ok(TbData {
        dataset: ds,
        summary,
    })
}

fn fit(a: &Fit, out: &mut Output) -> Outcome {
    let needed = a.outcome.propensity();
    match (a.ps, needed) {
        (Some(p), None) => {
            return Err(Failure::Usage(format!(
                "{} takes no propensity score; drop --ps {p}",
                a.outcome
            )));
        }
        (Some(p), Some(n)) if p != n => {
            return Err(Failure::Usage(format!(
                "{} is built on {n}, not {p}",
                a.outcome
            )));
        }
        _ => {}
    }
    let label = a.outcome.label();
    let mut names = vec![
        format!("fit_{label}.json"),
        format!("fit_{label}.manifest.json"),
    ];
    if a.save_draws {
        names.push(format!("fit_{label}.draws.csv"));
    }
    out.claim(&names)?;
    let data = load_tb(&a.tb)?;
    let settings = a.common.settings();
    let res = pipeline::two_step(&data.dataset, a.outcome, &settings)?;
    if a.save_draws {
        out.write(&names[2], |w| Ok(res.outcome_fit.sample.write_csv(w)?))?;
    }
    out.json(
        &names[0],
        &json!({ "cohort": data.summary, "report": res.report, "propensity": res.propensity.map(|p| json!({
            "kind": p.kind, "point_estimates": p.point_estimates, "warnings": p.warnings, "converged": p.converged
        })) }),
    )?;
    out.manifest(
        &names[1],
        "fit",
        a.common.seed,
        json!({ "outcome": label, "ps": needed, "settings": settings, "tb": tb_config(&a.tb) }),
    )?;
    Ok(())
}

fn tb_config(a: &TbArgs) -> Value {
    json!({
        "data": a.data.display().to_string(),
        "centroids": a.centroids.as_ref().map(|p| p.display().to_string()),
        "column_map": a.column_map.as_ref().map(|p| p.display().to_string()),
        "standardize": a.standardize,
        "min_age": a.min_age.unwrap_or(11),
    })
}

fn fit_propensities(
    ds: &Dataset,
    kinds: &[PropensityModelKind],
    settings: &PipelineSettings,
) -> Result<Vec<(PropensityEstimate, StageFit)>, Failure> {
    kinds
        .iter()
        .map(|&k| pipeline::estimate_propensity(ds, k, settings).map_err(Failure::from))
        .collect()
}

fn balance(a: &Balance, out: &mut Output) -> Outcome {
    if a.ps.is_empty() {
        return Err(Failure::Usage(
            "--ps needs at least one propensity model".into(),
        ));
    }
    let names = [
        "balance.csv".to_string(),
        "positivity.json".to_string(),
        "balance.manifest.json".to_string(),
    ];
    out.claim(&names)?;
    let data = load_tb(&a.tb)?;
    let settings = a.common.settings();
    let fits = fit_propensities(&data.dataset, &a.ps, &settings)?;
    let cols: Vec<(&str, &[f64])> = fits
        .iter()
        .map(|(e, _)| (e.kind.label(), e.ps.as_slice()))
        .collect();
    let table = diagnostics::balance_table(&data.dataset, &cols)?;
    out.write(&names[0], |w| Ok(table.write_csv(w)?))?;
    let mut pos = serde_json::Map::new();
    for (e, f) in &fits {
        pos.insert(
            e.kind.label().to_string(),
            json!({
                "positivity": diagnostics::positivity_summary(&e.ps, &data.dataset.exposure)?,
                "converged": f.convergence.pass,
                "warnings": e.warnings,
            }),
        );
    }
    out.json(&names[1], &Value::Object(pos))?;
    out.manifest(
        &names[2],
        "balance",
        a.common.seed,
        json!({ "ps": a.ps, "settings": settings, "tb": tb_config(&a.tb) }),
    )?;
    Ok(())
}

enum ModelId {
    Ps(PropensityModelKind),
    Outcome(OutcomeModelKind),
}

fn parse_model_id(s: &str) -> Result<ModelId, Failure> {
    if let Ok(k) = s.parse::<PropensityModelKind>() {
        return Ok(ModelId::Ps(k));
    }
    s.parse::<OutcomeModelKind>()
        .map(ModelId::Outcome)
        .map_err(|_| Failure::Usage(format!("unknown model `{s}`; valid: PS1..PS3, M1..M15")))
}

fn compare(a: &Compare, out: &mut Output) -> Outcome {
    let ids: Vec<ModelId> = a
        .models
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(parse_model_id)
        .collect::<Result<_, _>>()?;
    if ids.is_empty() {
        return Err(Failure::Usage("--models needs at least one model".into()));
    }
    let names = [
        "compare.csv".to_string(),
        "compare.manifest.json".to_string(),
    ];
    out.claim(&names)?;
    let data = load_tb(&a.tb)?;
    let ds = &data.dataset;
    let settings = a.common.settings();

    let mut ps_needed: Vec<PropensityModelKind> = ids
        .iter()
        .filter_map(|m| match m {
            ModelId::Ps(k) => Some(*k),
            ModelId::Outcome(o) => o.propensity(),
        })
        .collect();
    ps_needed.sort();
    ps_needed.dedup();
    let ps_fits = fit_propensities(ds, &ps_needed, &settings)?;
    let lookup = |k: PropensityModelKind| {
        ps_fits
            .iter()
            .find(|(e, _)| e.kind == k)
            .expect("fitted above")
    };

    let mut rows = Vec::new();
    for id in &ids {
        let (label, fit) = match id {
            ModelId::Ps(k) => (k.label().to_string(), lookup(*k).1.clone()),
            ModelId::Outcome(o) => {
                let est = o.propensity().map(|k| &lookup(k).0);
                (o.label(), pipeline::fit_outcome(ds, *o, est, &settings)?)
            }
        };
        let r = fit.fit_report()?;
        let rhat = fit.convergence.worst().map_or(f64::NAN, |w| w.1);
        rows.push((label, r, rhat));
    }
    out.write(&names[0], |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record([
            "model",
            "elpd_waic",
            "p_waic",
            "waic",
            "elpd_loo",
            "p_loo",
            "loo",
            "n_high_k",
            "max_rhat",
        ])?;
        for (label, r, rhat) in &rows {
            c.write_record([
                label.clone(),
                format!("{:.2}", r.elpd_waic),
                format!("{:.2}", r.p_waic),
                format!("{:.2}", r.waic),
                format!("{:.2}", r.elpd_loo),
                format!("{:.2}", r.p_loo),
                format!("{:.2}", r.loo),
                r.n_high_k.to_string(),
                format!("{rhat:.4}"),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    out.manifest(
        &names[1],
        "compare",
        a.common.seed,
        json!({ "models": a.models, "settings": settings, "tb": tb_config(&a.tb) }),
    )?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Failure::Usage("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Failure::Runtime(anyhow!("thread pool: {e}")))?;
    }
    let mut out = Output::new(&cli.out, cli.force)?;
    match &cli.command {
        Command::SimulateLinear(a) => simulate_linear(a, &mut out),
        Command::SimulateBinary(a) => simulate_binary(a, &mut out),
        Command::Fit(a) => fit(a, &mut out),
        Command::Balance(a) => balance(a, &mut out),
        Command::Compare(a) => compare(a, &mut out),
    }
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
