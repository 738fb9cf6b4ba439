//! Replicated comparison of the spatial model against the baselines on
//! held-out synthetic subjects.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vmfreg_core::geometry::{cayley_to_rotation, CayleyParams, Rotation3};
use vmfreg_core::inference::{angular_expectation, marginal_mode_draws};
use vmfreg_core::mcmc::fit;
use vmfreg_core::model::{ModelConfig, ModelData};
use vmfreg_core::rng::derive_seed;
use vmfreg_core::UnitVector3;

use crate::evaluate::{evaluate, PredictionError};
use crate::gaussian::{fit_gaussian, GibbsConfig, Response};
use crate::nonspatial::{fit_vmf_nonspatial, NonSpatialConfig};
use crate::simulate::{simulate, SyntheticConfig, SyntheticData};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SpatialVmf,
    NonSpatialVmf,
    Gauss1,
    Gauss2,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SpatialVmf, Method::NonSpatialVmf, Method::Gauss1, Method::Gauss2];

    pub fn name(self) -> &'static str {
        match self {
            Method::SpatialVmf => "spatial_vmf",
            Method::NonSpatialVmf => "nonspatial_vmf",
            Method::Gauss1 => "gauss1",
            Method::Gauss2 => "gauss2",
        }
    }
}

/// MCMC lengths shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainLengths {
    pub total: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for ChainLengths {
    fn default() -> Self {
        Self { total: 5000, burn_in: 2000, thin: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchGrid {
    /// Generator settings; `kappa`, `lag` and `seed` are overridden per cell.
    pub base: SyntheticConfig,
    pub kappas: Vec<f64>,
    pub true_lags: Vec<usize>,
    /// Lags fitted by the spatial model.
    pub lags: Vec<usize>,
    pub replicates: usize,
    pub methods: Vec<Method>,
    pub chain: ChainLengths,
    pub seed: u64,
}

impl Default for BenchGrid {
    fn default() -> Self {
        Self {
            base: SyntheticConfig::default(),
            kappas: vec![20.0],
            true_lags: vec![3],
            lags: vec![1, 2, 3, 4, 5],
            replicates: 10,
            methods: Method::ALL.to_vec(),
            chain: ChainLengths::default(),
            seed: 1,
        }
    }
}

impl BenchGrid {
    pub fn validate(&self) -> Result<(), String> {
        if self.kappas.is_empty() || self.true_lags.is_empty() {
            return Err("kappas and true_lags must be non-empty".into());
        }
        if let Some(k) = self.kappas.iter().find(|k| !(k.is_finite() && **k >= 0.0)) {
            return Err(format!("kappas: {k} is not a finite non-negative value"));
        }
        if self.true_lags.contains(&0) || self.lags.contains(&0) {
            return Err("lags must be at least 1".into());
        }
        if self.replicates == 0 {
            return Err("replicates must be at least 1".into());
        }
        if self.methods.is_empty() {
            return Err("methods must be non-empty".into());
        }
        if self.methods.contains(&Method::SpatialVmf) && self.lags.is_empty() {
            return Err("lags must be non-empty when spatial_vmf is benchmarked".into());
        }
        let c = self.chain;
        if c.thin == 0 || c.total <= c.burn_in {
            return Err(format!("chain: need total > burn_in and thin ≥ 1 (got {c:?})"));
        }
        self.base.validate().map_err(|e| format!("base: {e}"))
    }

    fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for (ki, &kappa) in self.kappas.iter().enumerate() {
            for &true_p in &self.true_lags {
                for replicate in 0..self.replicates {
                    out.push(Cell { kappa_index: ki, kappa, true_p, replicate });
                }
            }
        }
        out
    }

    fn jobs(&self) -> Vec<(Method, Option<usize>)> {
        let mut out = Vec::new();
        for &m in &self.methods {
            if m == Method::SpatialVmf {
                out.extend(self.lags.iter().map(|&p| (m, Some(p))));
            } else {
                out.push((m, None));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    kappa_index: usize,
    kappa: f64,
    true_p: usize,
    replicate: usize,
}

/// One fitted method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    #[serde(rename = "P")]
    pub lag: Option<usize>,
    pub kappa: f64,
    pub true_p: usize,
    pub replicate: usize,
    pub sep_angle: Option<f64>,
    pub rmse: Option<f64>,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    #[serde(rename = "P")]
    pub lag: Option<usize>,
    pub kappa: f64,
    pub true_p: usize,
    pub n_ok: usize,
    pub n_failed: usize,
    pub mean_sep_angle: Option<f64>,
    pub mean_rmse: Option<f64>,
}

/// Replicate counts for one `(κ, true P)` setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub kappa: f64,
    pub true_p: usize,
    pub replicates: usize,
    /// Spatial model at the true lag has the lowest separation angle of all
    /// benchmarked baselines.
    pub spatial_wins: usize,
    /// The true lag attains the minimum separation angle among fitted lags.
    pub true_lag_argmin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub cells: Vec<CellSummary>,
    pub ordering: Vec<Ordering>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub grid: BenchGrid,
    pub rows: Vec<BenchRow>,
}

fn cell_config(grid: &BenchGrid, cell: &Cell) -> SyntheticConfig {
    SyntheticConfig {
        kappa: cell.kappa,
        lag: cell.true_p,
        seed: derive_seed(grid.seed, &[cell.kappa_index as u64, cell.true_p as u64, cell.replicate as u64]),
        ..grid.base.clone()
    }
}

fn observed_pairs(test: &ModelData) -> Vec<(usize, usize, UnitVector3)> {
    let mut out = Vec::new();
    for i in 0..test.n_subjects() {
        for v in 0..test.n_voxels() {
            if let Some(e) = test.direction(i, v) {
                out.push((i, v, *e));
            }
        }
    }
    out
}

fn mean_rotation(cayley: impl Iterator<Item = CayleyParams>) -> Rotation3 {
    let (mut acc, mut n) = ([0.0; 3], 0.0);
    for c in cayley {
        for (a, b) in acc.iter_mut().zip(c.to_array()) {
            *a += b;
        }
        n += 1.0;
    }
    cayley_to_rotation(&CayleyParams::from_array(acc.map(|a| a / n)))
}

fn score(
    pairs: &[(usize, usize, UnitVector3)],
    q_hat: Option<&Rotation3>,
    mut predict: impl FnMut(usize, usize) -> Result<UnitVector3, String>,
) -> Result<PredictionError, String> {
    let mut pred = Vec::with_capacity(pairs.len());
    let mut obs = Vec::with_capacity(pairs.len());
    for &(i, v, e) in pairs {
        pred.push(predict(i, v)?);
        obs.push(e);
    }
    evaluate(&pred, &obs, q_hat).map_err(|e| e.to_string())
}

/// Fits one method on the training split and scores it on the test split.
pub fn run_method(
    syn: &SyntheticData,
    method: Method,
    lag: Option<usize>,
    chain: ChainLengths,
    seed: u64,
) -> Result<PredictionError, String> {
    let train = syn.train_data().map_err(|e| e.to_string())?;
    let test = syn.test_data().map_err(|e| e.to_string())?;
    let pairs = observed_pairs(&test);
    let xs: Vec<DVector<f64>> = (0..test.n_subjects()).map(|i| test.x_row(i).clone()).collect();
    match method {
        Method::SpatialVmf => {
            let lag = lag.ok_or("spatial_vmf needs a lag")?;
            let cfg = ModelConfig {
                lag,
                total: chain.total,
                burn_in: chain.burn_in,
                thin: chain.thin,
                seed,
                ..Default::default()
            };
            let draws = fit(&train, &cfg, seed).map_err(|e| e.to_string())?;
            let q_hat = mean_rotation(draws.states.iter().map(|s| s.cayley));
            let modes: Vec<Vec<Vec<UnitVector3>>> = xs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    marginal_mode_draws(&draws.states, &syn.atlas, x, derive_seed(seed, &[0x70726564, i as u64]))
                })
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            score(&pairs, Some(&q_hat), |i, v| angular_expectation(&modes[i][v]).map_err(|e| e.to_string()))
        }
        Method::NonSpatialVmf => {
            let cfg =
                NonSpatialConfig { total: chain.total, burn_in: chain.burn_in, thin: chain.thin, ..Default::default() };
            let draws = fit_vmf_nonspatial(&train, &cfg, seed).map_err(|e| e.to_string())?;
            let q_hat = mean_rotation(draws.states.iter().map(|s| s.cayley));
            score(&pairs, Some(&q_hat), |i, v| {
                angular_expectation(&draws.mode_draws(&xs[i], v)).map_err(|e| e.to_string())
            })
        }
        Method::Gauss1 | Method::Gauss2 => {
            let response = if method == Method::Gauss1 { Response::Cartesian } else { Response::Linked };
            let cfg = GibbsConfig { total: chain.total, burn_in: chain.burn_in, thin: chain.thin };
            let draws = fit_gaussian(&train, response, &cfg, seed).map_err(|e| e.to_string())?;
            score(&pairs, None, |i, v| {
                draws.predict(&xs[i], v).ok_or_else(|| format!("zero-length prediction at subject {i}, voxel {v}"))
            })
        }
    }
}

/// Runs every `(cell, method, lag)` job in parallel. Failed jobs are recorded
/// in their row and do not stop the run; rows come back in grid order.
pub fn run_benchmark(grid: &BenchGrid) -> Result<BenchResult, String> {
    grid.validate()?;
    let cells = grid.cells();
    let data: Vec<Result<SyntheticData, String>> = cells.par_iter().map(|c| simulate(&cell_config(grid, c))).collect();
    let jobs = grid.jobs();
    let keys: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..jobs.len()).map(move |j| (c, j))).collect();
    let rows = keys
        .par_iter()
        .map(|&(c, j)| {
            let cell = &cells[c];
            let (method, lag) = jobs[j];
            let seed = derive_seed(
                grid.seed,
                &[0x0066_6974, cell.kappa_index as u64, cell.true_p as u64, cell.replicate as u64, j as u64],
            );
            let start = Instant::now();
            let outcome = data[c].clone().and_then(|syn| run_method(&syn, method, lag, grid.chain, seed));
            let seconds = start.elapsed().as_secs_f64();
            if let Err(e) = &outcome {
                log::warn!("{} P={lag:?} kappa={} rep={} failed: {e}", method.name(), cell.kappa, cell.replicate);
            }
            BenchRow {
                method,
                lag,
                kappa: cell.kappa,
                true_p: cell.true_p,
                replicate: cell.replicate,
                sep_angle: outcome.as_ref().ok().map(|r| r.sep_angle),
                rmse: outcome.as_ref().ok().map(|r| r.rmse),
                seconds,
                error: outcome.err(),
            }
        })
        .collect();
    Ok(BenchResult { grid: grid.clone(), rows })
}

impl BenchResult {
    pub fn summary(&self) -> BenchSummary {
        let mut groups: BTreeMap<(u64, usize, Method, Option<usize>), Vec<&BenchRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((r.kappa.to_bits(), r.true_p, r.method, r.lag)).or_default().push(r);
        }
        let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let cells = groups
            .into_iter()
            .map(|((kb, true_p, method, lag), rows)| CellSummary {
                method,
                lag,
                kappa: f64::from_bits(kb),
                true_p,
                n_ok: rows.iter().filter(|r| r.error.is_none()).count(),
                n_failed: rows.iter().filter(|r| r.error.is_some()).count(),
                mean_sep_angle: mean(rows.iter().filter_map(|r| r.sep_angle).collect()),
                mean_rmse: mean(rows.iter().filter_map(|r| r.rmse).collect()),
            })
            .collect();
        BenchSummary { cells, ordering: self.ordering() }
    }

    fn ordering(&self) -> Vec<Ordering> {
        let mut out = Vec::new();
        for &kappa in &self.grid.kappas {
            for &true_p in &self.grid.true_lags {
                let (mut wins, mut argmin) = (0, 0);
                for rep in 0..self.grid.replicates {
                    let rows: Vec<&BenchRow> = self
                        .rows
                        .iter()
                        .filter(|r| r.kappa == kappa && r.true_p == true_p && r.replicate == rep)
                        .collect();
                    let sep = |m: Method, lag: Option<usize>| {
                        rows.iter().find(|r| r.method == m && r.lag == lag).and_then(|r| r.sep_angle)
                    };
                    let Some(best) = sep(Method::SpatialVmf, Some(true_p)) else { continue };
                    let others: Vec<Option<f64>> =
                        self.grid.methods.iter().filter(|&&m| m != Method::SpatialVmf).map(|&m| sep(m, None)).collect();
                    if !others.is_empty() && others.iter().all(|o| o.is_none_or(|s| best < s)) {
                        wins += 1;
                    }
                    let lag_errs: Vec<f64> =
                        self.grid.lags.iter().filter_map(|&p| sep(Method::SpatialVmf, Some(p))).collect();
                    if lag_errs.iter().all(|&s| best <= s) {
                        argmin += 1;
                    }
                }
                out.push(Ordering {
                    kappa,
                    true_p,
                    replicates: self.grid.replicates,
                    spatial_wins: wins,
                    true_lag_argmin: argmin,
                });
            }
        }
        out
    }

    /// Writes the result table with columns
    /// `method, P, kappa, true_p, replicate, sep_angle, rmse, seconds, error`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["method", "P", "kappa", "true_p", "replicate", "sep_angle", "rmse", "seconds", "error"])?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            wtr.write_record([
                r.method.name().to_string(),
                r.lag.map(|p| p.to_string()).unwrap_or_default(),
                r.kappa.to_string(),
                r.true_p.to_string(),
                r.replicate.to_string(),
                opt(r.sep_angle),
                opt(r.rmse),
                format!("{:.3}", r.seconds),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}
