use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use vmfreg_bench::benchmark::run_benchmark;
use vmfreg_bench::evaluate::evaluate;
use vmfreg_bench::simulate;
use vmfreg_core::diagnostics::{DiagnosticsReport, HW_MIN_LENGTH};
use vmfreg_core::geometry::{cayley_to_rotation, CayleyParams};
use vmfreg_core::inference::{angular_expectation, build_contrast, effect_map, marginal_mode_draws, Contrast};
use vmfreg_core::mcmc::{Checkpoint, Sampler};
use vmfreg_core::model::{build_design, CovariateTable, Design, ModelConfig, ModelState};
use vmfreg_core::rng::derive_seed;
use vmfreg_core::UnitVector3;

use crate::config::RunConfig;
use crate::error::{input, CliError, CliResult};
use crate::formats::*;

#[derive(Debug, Parser)]
#[command(name = "vmfreg", version, about = "Spatial von Mises-Fisher regression")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (or file, for `predict` and `effects`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic data set.
    Simulate,
    /// Run the sampler on a data directory.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        lag: Option<usize>,
        /// Stop after this many iterations and write a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Continue from `checkpoint.json` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Posterior predictive mode directions for the subjects of a data directory.
    Predict {
        /// Directory written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tangent-normal effect maps for the configured contrasts.
    Effects {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        quantile: Option<f64>,
    },
    /// Recompute convergence diagnostics from stored draws.
    Diagnose {
        #[arg(long)]
        fit: PathBuf,
    },
    /// Run the benchmark grid.
    Bench,
}

pub fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(input("--threads must be at least 1"));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    let g = &cli.global;
    match cli.command {
        Command::Simulate => cmd_simulate(&mut cfg, g),
        Command::Fit { data, lag, stop_after, resume } => {
            cmd_fit(&mut cfg, g, data.as_deref(), lag, stop_after, resume)
        }
        Command::Predict { fit, data } => cmd_predict(&cfg, g, &fit, data.as_deref()),
        Command::Effects { fit, data, threshold, quantile } => {
            cmd_effects(&mut cfg, g, &fit, data.as_deref(), threshold, quantile)
        }
        Command::Diagnose { fit } => cmd_diagnose(g, &fit),
        Command::Bench => cmd_bench(&mut cfg, g),
    }
}

fn out_dir(g: &Global) -> CliResult<PathBuf> {
    let dir = g.out.clone().ok_or_else(|| input("--out is required"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn out_file(g: &Global) -> CliResult<PathBuf> {
    let path = g.out.clone().ok_or_else(|| input("--out is required"))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(path)
}

#[derive(Serialize, Deserialize)]
struct TruthFile {
    config: vmfreg_bench::SyntheticConfig,
    truth: vmfreg_bench::Truth,
}

fn cmd_simulate(cfg: &mut RunConfig, g: &Global) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.simulate.seed = s;
    }
    cfg.validate_simulate()?;
    let dir = out_dir(g)?;
    let syn = simulate(&cfg.simulate).map_err(|e| input(format!("simulate.{e}")))?;
    write_atlas(&dir.join(ATLAS), &syn.atlas)?;
    write_covariates(&dir.join(COVARIATES), &syn.train.table)?;
    write_directions(&dir.join(DIRECTIONS), &syn.train.table.subject_ids, &syn.train.directions)?;
    write_json(&dir.join(TRUTH), &TruthFile { config: syn.config.clone(), truth: syn.truth.clone() })?;
    if syn.config.n_test > 0 {
        let held = dir.join("heldout");
        fs::create_dir_all(&held).context("creating heldout directory")?;
        write_atlas(&held.join(ATLAS), &syn.atlas)?;
        write_covariates(&held.join(COVARIATES), &syn.test.table)?;
        write_directions(&held.join(DIRECTIONS), &syn.test.table.subject_ids, &syn.test.directions)?;
    }
    println!(
        "simulated {} fibers, {} voxels, {} training and {} held-out subjects into {}",
        syn.atlas.n_fibers(),
        syn.atlas.n_voxels(),
        syn.config.n_train,
        syn.config.n_test,
        dir.display()
    );
    Ok(())
}

/// Design metadata needed to rebuild covariate rows for new subjects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignInfo {
    pub covariate_names: Vec<String>,
    pub levels: Vec<String>,
    pub group_specific: bool,
    pub column_names: Vec<String>,
}

impl DesignInfo {
    fn of(d: &Design) -> Self {
        Self {
            covariate_names: d.covariate_names.clone(),
            levels: d.levels.clone(),
            group_specific: d.group_specific,
            column_names: d.column_names.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub seed: u64,
    pub config: ModelConfig,
    pub iterations: usize,
    pub n_draws: usize,
    pub design: DesignInfo,
    pub acceptance: std::collections::BTreeMap<String, f64>,
    pub acceptance_counts: vmfreg_core::mcmc::AcceptanceLedger,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub n_draws: usize,
    pub stationary_fraction: Option<f64>,
    pub min_ess: Option<f64>,
    pub note: Option<String>,
    pub report: Option<DiagnosticsReport>,
}

fn diagnostics_of(states: &[ModelState]) -> DiagnosticsFile {
    let n = states.len();
    let mut traces = vmfreg_core::mcmc::scalar_traces(states);
    traces.extend(vmfreg_core::mcmc::coefficient_traces(states));
    match DiagnosticsReport::from_traces(&traces) {
        Ok(r) => DiagnosticsFile {
            n_draws: n,
            stationary_fraction: Some(r.stationary_fraction()),
            min_ess: Some(r.min_ess()),
            note: None,
            report: Some(r),
        },
        Err(e) => DiagnosticsFile {
            n_draws: n,
            stationary_fraction: None,
            min_ess: None,
            note: Some(format!("diagnostics skipped: {e} (at least {HW_MIN_LENGTH} draws needed)")),
            report: None,
        },
    }
}

fn cmd_fit(
    cfg: &mut RunConfig,
    g: &Global,
    data: Option<&Path>,
    lag: Option<usize>,
    stop_after: Option<usize>,
    resume: bool,
) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.model.seed = s;
    }
    if let Some(p) = lag {
        cfg.model.lag = p;
    }
    cfg.validate_model()?;
    let dir = out_dir(g)?;
    let dd = read_data_dir(&cfg.data_dir(data)?, None, true)?;
    let md = model_data(&dd, cfg.model.group_specific)?;
    let draws_path = dir.join(DRAWS);
    let ckpt_path = dir.join(CHECKPOINT);

    let mut sampler = if resume {
        let ckpt: Checkpoint = read_json(&ckpt_path)?;
        let done = ckpt.iteration;
        // Drop any records written after the checkpoint.
        let kept: Vec<DrawRecord> = if draws_path.exists() {
            read_draws(&draws_path)?.into_iter().filter(|r| r.iteration <= done).collect()
        } else {
            Vec::new()
        };
        let mut w = BufWriter::new(File::create(&draws_path).context("rewriting draws")?);
        for r in &kept {
            write_draw(&mut w, r.iteration, &r.state)?;
        }
        w.flush().context("writing draws")?;
        Sampler::from_checkpoint(&md, ckpt).map_err(|e| input(format!("checkpoint.json: {e}")))?
    } else {
        File::create(&draws_path).context("creating draws file")?;
        Sampler::new(&md, cfg.model.clone(), cfg.model.seed).map_err(|e| input(e.to_string()))?
    };

    let total = sampler.config().total;
    let until = stop_after.map_or(total, |s| s.min(total));
    {
        let f = OpenOptions::new().append(true).open(&draws_path).context("opening draws")?;
        let mut w = BufWriter::new(f);
        let mut io_err = None;
        let mut on_draw = |t: usize, s: &ModelState| {
            if io_err.is_none() {
                if let Err(e) = write_draw(&mut w, t, s) {
                    io_err = Some(e);
                }
            }
        };
        sampler.run_until(until, &mut on_draw).map_err(|e| CliError::Runtime(e.into()))?;
        if let Some(e) = io_err {
            return Err(e.into());
        }
        w.flush().context("writing draws")?;
    }

    if sampler.iteration() < total {
        write_json(&ckpt_path, &sampler.checkpoint())?;
        println!(
            "stopped at iteration {} of {total}; checkpoint written to {}",
            sampler.iteration(),
            ckpt_path.display()
        );
        return Ok(());
    }
    if ckpt_path.exists() {
        fs::remove_file(&ckpt_path).context("removing checkpoint")?;
    }

    let records = read_draws(&draws_path)?;
    let states: Vec<ModelState> = records.into_iter().map(|r| r.state).collect();
    let ledger = sampler.acceptance().clone();
    let summary = FitSummary {
        seed: cfg.model.seed,
        config: sampler.config().clone(),
        iterations: sampler.iteration(),
        n_draws: states.len(),
        design: DesignInfo::of(&md.design),
        acceptance: ledger.sampling_rates(),
        acceptance_counts: ledger,
    };
    write_json(&dir.join(FIT_SUMMARY), &summary)?;
    let diag = diagnostics_of(&states);
    write_json(&dir.join(DIAGNOSTICS), &diag)?;

    println!("{} iterations, {} stored draws", summary.iterations, summary.n_draws);
    println!("acceptance (post burn-in):");
    for (block, rate) in &summary.acceptance {
        println!("  {block:<10} {rate:.3}");
    }
    match (diag.stationary_fraction, diag.min_ess) {
        (Some(s), Some(e)) => println!("stationary traces {:.1}%, min ESS {e:.1}", 100.0 * s),
        _ => println!("{}", diag.note.unwrap_or_default()),
    }
    Ok(())
}

struct FitDir {
    summary: FitSummary,
    states: Vec<ModelState>,
}

fn read_fit_dir(fit: &Path) -> CliResult<FitDir> {
    let summary: FitSummary = read_json(&fit.join(FIT_SUMMARY))?;
    let states: Vec<ModelState> = read_draws(&fit.join(DRAWS))?.into_iter().map(|r| r.state).collect();
    if states.is_empty() {
        return Err(input(format!("{}: no draws", fit.join(DRAWS).display())));
    }
    Ok(FitDir { summary, states })
}

/// Rebuilds the fitted design over a new covariate table.
fn design_for(info: &DesignInfo, table: &CovariateTable) -> CliResult<Design> {
    if table.names != info.covariate_names {
        return Err(input(format!(
            "covariates.csv: columns {:?} do not match the fitted covariates {:?}",
            table.names, info.covariate_names
        )));
    }
    let design = build_design(table, info.group_specific).map_err(|e| input(e.to_string()))?;
    if design.column_names != info.column_names {
        return Err(input(format!(
            "design columns {:?} do not match the fit {:?}",
            design.column_names, info.column_names
        )));
    }
    Ok(design)
}

#[derive(Serialize)]
struct PredictionMetrics {
    n: usize,
    sep_angle: f64,
    rmse: f64,
}

fn cmd_predict(cfg: &RunConfig, g: &Global, fit: &Path, data: Option<&Path>) -> CliResult<()> {
    let fd = read_fit_dir(fit)?;
    let info = &fd.summary.design;
    let levels = (!info.levels.is_empty()).then_some(info.levels.as_slice());
    let dd = read_data_dir(&cfg.data_dir(data)?, levels, false)?;
    let design = design_for(info, &dd.table)?;
    let seed = g.seed.unwrap_or(fd.summary.seed);
    let out = out_file(g)?;
    let mut w = csv::Writer::from_path(&out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record(["subject", "voxel", "x", "y", "z"]).context("writing predictions")?;
    let (mut pred, mut obs) = (Vec::new(), Vec::new());
    for i in 0..dd.table.n_subjects() {
        let x = design.x.row(i).transpose();
        let draws = marginal_mode_draws(&fd.states, &dd.atlas, &x, derive_seed(seed, &[0x7072_6564, i as u64]))
            .map_err(|e| CliError::Runtime(anyhow::anyhow!("{e}")))?;
        for (v, dv) in draws.iter().enumerate() {
            let m = angular_expectation(dv).map_err(|e| CliError::Runtime(anyhow::anyhow!("voxel {v}: {e}")))?;
            let a = m.to_array();
            w.write_record([
                dd.table.subject_ids[i].clone(),
                v.to_string(),
                a[0].to_string(),
                a[1].to_string(),
                a[2].to_string(),
            ])
            .context("writing predictions")?;
            if let Some(e) = dd.directions.as_ref().and_then(|f| f.get(i, v)) {
                pred.push(m);
                obs.push(UnitVector3::from_vector(*e).map_err(|err| input(format!("directions.csv: {err}")))?);
            }
        }
    }
    w.flush().context("writing predictions")?;
    if !obs.is_empty() {
        let n = fd.states.len() as f64;
        let mean = fd.states.iter().fold([0.0; 3], |acc, s| {
            let a = s.cayley.to_array();
            [acc[0] + a[0] / n, acc[1] + a[1] / n, acc[2] + a[2] / n]
        });
        let q = cayley_to_rotation(&CayleyParams::from_array(mean));
        let r = evaluate(&pred, &obs, Some(&q)).map_err(|e| CliError::Runtime(e.into()))?;
        let m = PredictionMetrics { n: obs.len(), sep_angle: r.sep_angle, rmse: r.rmse };
        println!("{}", serde_json::to_string(&m).context("encoding metrics")?);
    }
    Ok(())
}

fn cmd_effects(
    cfg: &mut RunConfig,
    g: &Global,
    fit: &Path,
    data: Option<&Path>,
    threshold: Option<f64>,
    quantile: Option<f64>,
) -> CliResult<()> {
    let threshold = threshold.unwrap_or(cfg.model.threshold);
    let q = quantile.unwrap_or(cfg.model.quantile);
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(input(format!("threshold: {threshold} outside (0, 1)")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(input(format!("quantile: {q} outside [0, 1]")));
    }
    if cfg.contrasts.is_empty() {
        return Err(input("contrasts: the config defines no [[contrasts]]"));
    }
    let fd = read_fit_dir(fit)?;
    let info = &fd.summary.design;
    let levels = (!info.levels.is_empty()).then_some(info.levels.as_slice());
    let dd = read_data_dir(&cfg.data_dir(data)?, levels, false)?;
    let design = design_for(info, &dd.table)?;
    let contrasts: Vec<Contrast> = cfg
        .contrasts
        .iter()
        .enumerate()
        .map(|(k, spec)| build_contrast(spec, &dd.table, &design).map_err(|e| input(format!("contrasts[{k}]: {e}"))))
        .collect::<CliResult<_>>()?;
    let map = effect_map(&fd.states, &dd.atlas, &contrasts, threshold, q).map_err(|e| input(e.to_string()))?;
    let out = out_file(g)?;
    let mut w = csv::Writer::from_path(&out).with_context(|| format!("creating {}", out.display()))?;
    for row in &map.rows {
        w.serialize(row).context("writing effects")?;
    }
    w.flush().context("writing effects")?;
    println!(
        "{} rows, {} flagged (z cutoff {})",
        map.rows.len(),
        map.flagged().count(),
        map.z_cutoff.map_or_else(|| "undefined".to_string(), |z| z.to_string())
    );
    Ok(())
}

fn cmd_diagnose(g: &Global, fit: &Path) -> CliResult<()> {
    let states: Vec<ModelState> = read_draws(&fit.join(DRAWS))?.into_iter().map(|r| r.state).collect();
    let diag = diagnostics_of(&states);
    let out = match &g.out {
        Some(_) => out_file(g)?,
        None => fit.join(DIAGNOSTICS),
    };
    write_json(&out, &diag)?;
    match (diag.stationary_fraction, diag.min_ess) {
        (Some(s), Some(e)) => {
            println!("{} draws, stationary traces {:.1}%, min ESS {e:.1}", diag.n_draws, 100.0 * s);
            if let Some(r) = &diag.report {
                for t in r.traces.iter().filter(|t| !t.hw.stationary) {
                    println!("  not stationary: {} (p = {:.3})", t.name, t.hw.p_value);
                }
            }
        }
        _ => println!("{}", diag.note.unwrap_or_default()),
    }
    Ok(())
}

fn cmd_bench(cfg: &mut RunConfig, g: &Global) -> CliResult<()> {
    if let Some(s) = g.seed {
        cfg.bench.seed = s;
    }
    cfg.validate_bench()?;
    let dir = out_dir(g)?;
    let result = run_benchmark(&cfg.bench).map_err(|e| input(format!("bench.{e}")))?;
    let f = File::create(dir.join("bench.csv")).context("creating bench.csv")?;
    result.write_csv(BufWriter::new(f)).context("writing bench.csv")?;
    let summary = result.summary();
    write_json(&dir.join("bench_summary.json"), &summary)?;
    let failed = result.rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} fits, {failed} failed", result.rows.len());
    for o in &summary.ordering {
        println!(
            "kappa {} true P {}: spatial wins {}/{}, true lag best {}/{}",
            o.kappa, o.true_p, o.spatial_wins, o.replicates, o.true_lag_argmin, o.replicates
        );
    }
    let mut out = std::io::stdout().lock();
    for c in &summary.cells {
        let lag = c.lag.map_or_else(|| "-".to_string(), |p| p.to_string());
        let sep = c.mean_sep_angle.map_or_else(|| "NA".to_string(), |s| format!("{s:.4}"));
        writeln!(out, "  {:<15} P={lag:<2} kappa={:<5} mean sep_angle {sep}", c.method.name(), c.kappa).ok();
    }
    Ok(())
}
