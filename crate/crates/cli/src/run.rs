//! The `run` command: load data, fit, write result files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use laplace_mh::bma::{summarize, write_grid_json, Summary};
use laplace_mh::dismap::{fit_dismap_with_progress, DismapFit, DismapOptions, DismapSpec};
use laplace_mh::econ::{fit_manski_with_progress, impacts, ManskiFit, ManskiSpec};
use laplace_mh::graphs::read_gal;
use laplace_mh::io::{read_counts, read_table, write_summaries};
use laplace_mh::laplace::MarginalGrid;
use laplace_mh::mh::{summarize_draws, ChainConfig, TraceRow};
use laplace_mh::oracle::{
    histogram_grid, impact_draws, oracle_dismap, oracle_manski, DismapOracleOptions, ManskiOracleOptions,
    OracleConfig, SampleTable,
};
use laplace_mh::Error;
use serde_json::json;

use crate::config::{prior, ModelKind, RunConfig};
use crate::CliError;

pub const SEED_VAR: &str = "LAPLACE_MH_SEED";
const DEFAULT_SEED: u64 = 1;
const ORACLE_ITERATIONS: usize = 100_000;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub dry_run: bool,
    pub workers: Option<usize>,
    pub output: Option<PathBuf>,
}

enum Data {
    Econ(ManskiSpec),
    Dismap(DismapSpec),
}

/// Chain settings after defaults, overrides and the seed variable.
enum Plan {
    Engine(ChainConfig),
    Oracle(OracleConfig, f64),
}

fn data_error(e: Error) -> CliError {
    match e {
        Error::InvalidConfig(_) | Error::OutOfRange(_) | Error::OutOfSupport(_) => CliError::Config(e.to_string()),
        _ => CliError::Data(e.to_string()),
    }
}

fn fit_error(e: Error) -> CliError {
    match e {
        Error::FitFailed { theta, source } => CliError::Numerical {
            message: source.to_string(),
            theta: Some(theta),
        },
        Error::InvalidConfig(_) | Error::OutOfRange(_) | Error::OutOfSupport(_) => CliError::Config(e.to_string()),
        _ => CliError::Numerical {
            message: e.to_string(),
            theta: None,
        },
    }
}

fn output_error(e: impl std::fmt::Display) -> CliError {
    CliError::Output(e.to_string())
}

fn load_data(config: &RunConfig) -> Result<Data, CliError> {
    let adjacency = read_gal(&config.data.gal).map_err(data_error)?;
    let p = &config.priors;
    if config.model.is_econ() {
        let table = read_table(&config.data.csv, &config.data.id_column).map_err(data_error)?;
        let response = config.data.response.as_deref().unwrap_or_default();
        let covariates: Vec<&str> = config.data.covariates.iter().map(String::as_str).collect();
        let mut spec = ManskiSpec::from_table(&table, &adjacency, response, &covariates).map_err(data_error)?;
        spec.lagged = config.lagged;
        if let Some(d) = p.precision {
            spec.precision_prior = prior("precision", d)?;
        }
        if let Some(b) = p.beta_precision {
            spec.beta_precision = b;
        }
        if let Some(names) = &config.track_latent {
            let known = spec.coefficient_names();
            if let Some(bad) = names.iter().find(|n| !known.contains(n)) {
                return Err(CliError::Config(format!("track_latent: {bad:?} is not a coefficient")));
            }
        }
        Ok(Data::Econ(spec))
    } else {
        let counts = read_counts(&config.data.csv, &adjacency).map_err(data_error)?;
        let mut spec = DismapSpec::from_counts(&counts, adjacency).map_err(data_error)?;
        if let Some(d) = p.delta {
            spec.delta_prior = prior("delta", d)?;
        }
        if let Some(d) = p.tau_v {
            spec.tau_v_prior = prior("tau_v", d)?;
        }
        if let Some(d) = p.tau_s {
            spec.tau_s_prior = prior("tau_s", d)?;
        }
        if let Some(a) = p.alpha_precision {
            spec.alpha_precision = a;
        }
        Ok(Data::Dismap(spec))
    }
}

fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_VAR) {
        Ok(text) => text
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_VAR}={text:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Fills the chain section of `config` with the values actually used.
fn resolve_plan(config: &mut RunConfig, data: &Data) -> Result<Plan, CliError> {
    let c = &mut config.chain;
    if let Some(seed) = seed_override()? {
        c.seed = Some(seed);
    }
    let seed = *c.seed.get_or_insert(DEFAULT_SEED);
    let oracle = matches!(config.model, ModelKind::OracleManski | ModelKind::OracleDismap);
    if oracle {
        if c.init.is_some() {
            return Err(CliError::Config("chain.init is not used by the reference samplers".into()));
        }
        let mut oc = OracleConfig::new(c.iterations.unwrap_or(ORACLE_ITERATIONS), seed);
        oc.burnin = c.burnin.unwrap_or(oc.burnin);
        oc.thin = c.thin.unwrap_or(oc.thin);
        let step = match c.proposal_sd.as_deref() {
            None => match data {
                Data::Econ(_) => ManskiOracleOptions::default().step,
                Data::Dismap(_) => DismapOracleOptions::default().log_step,
            },
            Some([s]) if *s > 0.0 && s.is_finite() => *s,
            Some(other) => {
                return Err(CliError::Config(format!(
                    "chain.proposal_sd for a reference sampler is one positive step, got {other:?}"
                )))
            }
        };
        if oc.thin == 0 || oc.burnin >= oc.iterations {
            return Err(CliError::Config(format!(
                "burnin {} must be below iterations {} and thin {} positive",
                oc.burnin, oc.iterations, oc.thin
            )));
        }
        (c.iterations, c.burnin, c.thin, c.proposal_sd) = (Some(oc.iterations), Some(oc.burnin), Some(oc.thin), Some(vec![step]));
        return Ok(Plan::Oracle(oc, step));
    }
    let (mut chain, dim) = match data {
        Data::Econ(_) => (ManskiSpec::default_chain(seed), 2),
        Data::Dismap(s) => (s.default_chain(seed), s.n_diseases()),
    };
    chain.burnin = c.burnin.unwrap_or(chain.burnin);
    chain.total = c.iterations.unwrap_or(chain.total);
    chain.thin = c.thin.unwrap_or(chain.thin);
    if let Some(sd) = &c.proposal_sd {
        chain.proposal.sd = sd.clone();
        if sd.len() != chain.proposal.kinds.len() {
            return Err(CliError::Config(format!("chain.proposal_sd needs {dim} entries, got {}", sd.len())));
        }
    }
    if let Some(init) = &c.init {
        chain.init = init.clone();
    }
    chain.validate(dim).map_err(|e| CliError::Config(e.to_string()))?;
    if let Data::Econ(s) = data {
        if !s.in_support(chain.init[0], chain.init[1]) {
            let (lo, hi) = s.support();
            return Err(CliError::Config(format!(
                "chain.init {:?} outside the support ({lo}, {hi})",
                chain.init
            )));
        }
    }
    (c.iterations, c.burnin, c.thin) = (Some(chain.total), Some(chain.burnin), Some(chain.thin));
    (c.proposal_sd, c.init) = (Some(chain.proposal.sd.clone()), Some(chain.init.clone()));
    Ok(Plan::Engine(chain))
}

pub fn run(path: &Path, options: &RunOptions) -> Result<(), CliError> {
    let started = Instant::now();
    let mut config = RunConfig::load(path)?;
    if let Some(out) = &options.output {
        config.output = out.clone();
    }
    if let Some(w) = options.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        config.workers = Some(w);
    }
    let data = load_data(&config)?;
    let plan = resolve_plan(&mut config, &data)?;
    if options.dry_run {
        let text = serde_json::to_string_pretty(&config).map_err(output_error)?;
        println!("{text}");
        return Ok(());
    }
    let workers = config.workers.unwrap_or(1);
    let result = match (&data, &plan) {
        (Data::Econ(spec), Plan::Engine(chain)) => {
            let fit = fit_manski_with_progress(spec, chain, workers, progress(chain.total)).map_err(fit_error)?;
            econ_engine(spec, &fit)?
        }
        (Data::Econ(spec), Plan::Oracle(oc, step)) => {
            let opts = ManskiOracleOptions {
                step: *step,
                ..Default::default()
            };
            let table = oracle_manski(spec, oc, &opts).map_err(fit_error)?;
            econ_oracle(spec, table)?
        }
        (Data::Dismap(spec), Plan::Engine(chain)) => {
            let opts = DismapOptions {
                workers,
                track_shared: config.track_shared(),
            };
            let fit = fit_dismap_with_progress(spec, chain, opts, progress(chain.total)).map_err(fit_error)?;
            dismap_engine(&fit)?
        }
        (Data::Dismap(spec), Plan::Oracle(oc, step)) => {
            let opts = DismapOracleOptions {
                log_step: *step,
                record_shared: config.track_shared(),
                ..Default::default()
            };
            let table = oracle_dismap(spec, oc, &opts).map_err(fit_error)?;
            dismap_oracle(spec, table)?
        }
    };
    result.write(&config, started)?;
    eprintln!("wrote {}", config.output.display());
    Ok(())
}

/// Prints a line to stderr at every tenth of the run.
fn progress(total: usize) -> impl FnMut(usize, &TraceRow) {
    let step = (total / 10).max(1);
    let mut accepted = 0usize;
    move |i, row| {
        accepted += row.accepted as usize;
        let done = i + 1;
        if done % step == 0 || done == total {
            eprintln!(
                "iteration {done}/{total}  theta {:?}  acceptance {:.3}",
                row.theta,
                accepted as f64 / done as f64
            );
        }
    }
}

/// Everything a run writes, gathered before touching the disk.
struct RunResult {
    chain: ChainFile,
    grids: Vec<MarginalGrid>,
    summaries: Vec<Summary>,
    side: SideTable,
    acceptance_rate: Option<f64>,
    kept: usize,
}

enum ChainFile {
    Engine(laplace_mh::mh::Chain),
    Oracle(SampleTable),
}

enum SideTable {
    Impacts(Vec<ImpactRow>),
    Shared(Vec<(String, f64, f64)>),
}

struct ImpactRow {
    method: &'static str,
    covariate: String,
    /// (mean, sd) of the direct, indirect and total impacts.
    moments: [(f64, f64); 3],
}

/// Histogram resolution for draw-based marginals; grids need at least 33
/// nodes.
fn bins(n: usize) -> usize {
    ((1.5 * (n as f64).sqrt()) as usize).clamp(40, 100)
}

fn hist(name: &str, samples: &[f64]) -> Result<MarginalGrid, CliError> {
    histogram_grid(name, samples, bins(samples.len())).map_err(fit_error)
}

fn draw_summary(name: &str, x: &[f64]) -> Result<Summary, CliError> {
    let d = summarize_draws(name, x).map_err(fit_error)?;
    Ok(Summary {
        name: d.name,
        mean: d.mean,
        sd: d.sd,
        q025: d.q025,
        q50: d.q50,
        q975: d.q975,
    })
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn impact_covariates(spec: &ManskiSpec) -> &[String] {
    &spec.covariate_names[1..]
}

fn econ_engine(spec: &ManskiSpec, fit: &ManskiFit) -> Result<RunResult, CliError> {
    let mut grids = Vec::new();
    for (j, name) in fit.chain.names.iter().enumerate() {
        grids.push(hist(name, &fit.chain.coordinate(j))?);
    }
    grids.extend(fit.coefficients.iter().cloned());
    grids.push(fit.precision.clone());
    grids.push(fit.sigma2.clone());
    let mut summaries = fit.summaries().map_err(fit_error)?;
    let mut rows = Vec::new();
    for cov in impact_covariates(spec) {
        let imp = impacts(fit, spec, cov).map_err(fit_error)?;
        let kinds = [imp.direct, imp.indirect, imp.total];
        for g in &kinds {
            summaries.push(summarize(g).map_err(fit_error)?);
        }
        rows.push(ImpactRow {
            method: "engine",
            covariate: cov.clone(),
            moments: [0, 1, 2].map(|k| (kinds[k].mean(), kinds[k].sd())),
        });
        grids.extend(kinds);
    }
    Ok(RunResult {
        acceptance_rate: Some(fit.chain.acceptance_rate()),
        kept: fit.chain.len(),
        chain: ChainFile::Engine(fit.chain.clone()),
        grids,
        summaries,
        side: SideTable::Impacts(rows),
    })
}

fn table_columns(table: &SampleTable, names: &[String]) -> Result<Vec<(String, Vec<f64>)>, CliError> {
    names
        .iter()
        .map(|n| Ok((n.clone(), table.column(n).map_err(fit_error)?)))
        .collect()
}

fn econ_oracle(spec: &ManskiSpec, table: SampleTable) -> Result<RunResult, CliError> {
    let mut columns = table_columns(&table, &table.names)?;
    let precision = table.column("precision").map_err(fit_error)?;
    columns.push(("sigma2".into(), precision.iter().map(|t| 1.0 / t).collect()));
    let mut rows = Vec::new();
    for cov in impact_covariates(spec) {
        let (d, i, t) = impact_draws(&table, spec, cov).map_err(fit_error)?;
        rows.push(ImpactRow {
            method: "oracle",
            covariate: cov.clone(),
            moments: [moments(&d), moments(&i), moments(&t)],
        });
        columns.push((format!("direct.{cov}"), d));
        columns.push((format!("indirect.{cov}"), i));
        columns.push((format!("total.{cov}"), t));
    }
    let (grids, summaries) = from_columns(&columns)?;
    Ok(RunResult {
        acceptance_rate: None,
        kept: table.len(),
        chain: ChainFile::Oracle(table),
        grids,
        summaries,
        side: SideTable::Impacts(rows),
    })
}

fn from_columns(columns: &[(String, Vec<f64>)]) -> Result<(Vec<MarginalGrid>, Vec<Summary>), CliError> {
    let mut grids = Vec::new();
    let mut summaries = Vec::new();
    for (name, x) in columns {
        grids.push(hist(name, x)?);
        summaries.push(draw_summary(name, x)?);
    }
    Ok((grids, summaries))
}

fn dismap_engine(fit: &DismapFit) -> Result<RunResult, CliError> {
    let mut grids = Vec::new();
    for (j, name) in fit.chain.names.iter().enumerate() {
        grids.push(hist(name, &fit.chain.coordinate(j))?);
    }
    for d in 1..fit.chain.names.len() {
        grids.push(hist(&fit.ratio_name(d), &fit.ratio_draws(d))?);
    }
    grids.extend(fit.alpha.iter().cloned());
    grids.push(fit.tau_v.clone());
    grids.push(fit.tau_s.clone());
    let shared = fit.shared.iter().map(|s| (s.id.clone(), s.mean, s.sd)).collect();
    Ok(RunResult {
        acceptance_rate: Some(fit.chain.acceptance_rate()),
        kept: fit.chain.len(),
        chain: ChainFile::Engine(fit.chain.clone()),
        grids,
        summaries: fit.summaries().map_err(fit_error)?,
        side: SideTable::Shared(shared),
    })
}

fn dismap_oracle(spec: &DismapSpec, table: SampleTable) -> Result<RunResult, CliError> {
    let deltas: Vec<String> = spec.diseases.iter().map(|d| format!("delta.{d}")).collect();
    let mut columns = table_columns(&table, &deltas)?;
    let first = columns[0].1.clone();
    for (d, name) in spec.diseases.iter().enumerate().skip(1) {
        let ratio = columns[d].1.iter().zip(&first).map(|(a, b)| a / b).collect();
        columns.push((format!("ratio.{name}"), ratio));
    }
    let mut rest: Vec<String> = spec.diseases.iter().map(|d| format!("alpha.{d}")).collect();
    rest.extend(["tau_v".to_string(), "tau_s".to_string()]);
    columns.extend(table_columns(&table, &rest)?);
    let (grids, summaries) = from_columns(&columns)?;
    let mut shared = Vec::new();
    for id in spec.adjacency.ids() {
        if let Ok(j) = table.index(&format!("v.{id}")) {
            let x: Vec<f64> = table.rows.iter().map(|r| r[j]).collect();
            let (m, s) = moments(&x);
            shared.push((id.clone(), m, s));
        }
    }
    Ok(RunResult {
        acceptance_rate: None,
        kept: table.len(),
        chain: ChainFile::Oracle(table),
        grids,
        summaries,
        side: SideTable::Shared(shared),
    })
}

impl RunResult {
    fn write(&self, config: &RunConfig, started: Instant) -> Result<(), CliError> {
        let out = &config.output;
        let marginals = out.join("marginals");
        fs::create_dir_all(&marginals).map_err(output_error)?;
        match &self.chain {
            ChainFile::Engine(c) => c.save_csv(out.join("chain.csv")),
            ChainFile::Oracle(t) => t.save_csv(out.join("chain.csv")),
        }
        .map_err(output_error)?;
        for g in &self.grids {
            write_grid_json(g, marginals.join(format!("{}.json", g.name))).map_err(output_error)?;
        }
        write_summaries(&self.summaries, out.join("summary.csv")).map_err(output_error)?;
        match &self.side {
            SideTable::Impacts(rows) => write_impacts(rows, &out.join("impacts.csv")),
            SideTable::Shared(rows) if !rows.is_empty() => write_shared(rows, &out.join("shared_field.csv")),
            SideTable::Shared(_) => Ok(()),
        }
        .map_err(output_error)?;
        let manifest = json!({
            "model": config.model,
            "seed": config.chain.seed,
            "config": config,
            "wall_time_seconds": started.elapsed().as_secs_f64(),
            "acceptance_rate": self.acceptance_rate,
            "kept_draws": self.kept,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(output_error)?;
        fs::write(out.join("manifest.json"), text + "\n").map_err(output_error)
    }
}

fn write_impacts(rows: &[ImpactRow], path: &Path) -> std::io::Result<()> {
    let mut text = String::from(
        "method,covariate,direct_mean,direct_sd,indirect_mean,indirect_sd,total_mean,total_sd\n",
    );
    for r in rows {
        text += &format!("{},{}", r.method, r.covariate);
        for (m, s) in r.moments {
            text += &format!(",{m},{s}");
        }
        text.push('\n');
    }
    fs::write(path, text)
}

fn write_shared(rows: &[(String, f64, f64)], path: &Path) -> std::io::Result<()> {
    let mut text = String::from("id,mean,sd\n");
    for (id, m, s) in rows {
        text += &format!("{id},{m},{s}\n");
    }
    fs::write(path, text)
}
