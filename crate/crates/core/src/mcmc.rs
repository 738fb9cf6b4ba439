//! Metropolis–Hastings-within-Gibbs sampler for the spatial model.
//!
//! One sweep updates, in order:
//! 1. each `η_iv` by a bivariate random-walk step followed by two chart
//!    flips across the azimuth seam and the pole (exact Gaussian draw where
//!    the direction is masked), subjects in parallel;
//! 2. all coefficients of one streamline and one channel jointly by an exact
//!    Gaussian draw;
//! 3. the four variances by inverse-gamma draws;
//! 4. every pacf element by a reflected random walk;
//! 5. `log κ` by a random walk;
//! 6. the Cayley parameters by a trivariate random walk.
//!
//! Random-walk scales adapt by Robbins–Monro during burn-in and are frozen
//! afterwards.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ar::PacfVector;
use crate::geometry::{cayley_to_rotation, CayleyParams};
use crate::link::{inverse_link, LinkedCoords};
use crate::model::{
    cayley_log_prior, direction_statistic, BlockCorrelations, Channel, ModelConfig, ModelData, ModelError, ModelState,
    IG_RATE, IG_SHAPE,
};
use crate::rng::{derive_seed, derived_rng, seeded_rng, ChainRng};
use crate::vmf::log_normalizer_3;

const LOG_SCALE_BOUNDS: (f64, f64) = (-15.0, 3.0);

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("non-finite log-posterior in block {block} at iteration {iteration}")]
    NonFiniteLogPosterior { block: &'static str, iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint does not match the data: {0}")]
    CheckpointMismatch(String),
}

/// The four AR processes of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArProcess {
    Eps,
    Xi,
    Alpha,
    Beta,
}

impl ArProcess {
    pub const ALL: [ArProcess; 4] = [ArProcess::Eps, ArProcess::Xi, ArProcess::Alpha, ArProcess::Beta];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn channel(self) -> Channel {
        match self {
            ArProcess::Eps | ArProcess::Alpha => Channel::Theta,
            ArProcess::Xi | ArProcess::Beta => Channel::Phi,
        }
    }

    pub fn is_random_effect(self) -> bool {
        matches!(self, ArProcess::Eps | ArProcess::Xi)
    }

    pub fn resid(ch: Channel) -> Self {
        match ch {
            Channel::Theta => ArProcess::Eps,
            Channel::Phi => ArProcess::Xi,
        }
    }

    pub fn coef(ch: Channel) -> Self {
        match ch {
            Channel::Theta => ArProcess::Alpha,
            Channel::Phi => ArProcess::Beta,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ArProcess::Eps => "eps",
            ArProcess::Xi => "xi",
            ArProcess::Alpha => "alpha",
            ArProcess::Beta => "beta",
        }
    }

    fn block_name(self) -> &'static str {
        match self {
            ArProcess::Eps => "pacf_eps",
            ArProcess::Xi => "pacf_xi",
            ArProcess::Alpha => "pacf_alpha",
            ArProcess::Beta => "pacf_beta",
        }
    }

    pub fn pacf(self, s: &ModelState) -> &PacfVector {
        match self {
            ArProcess::Eps => &s.pacf_eps,
            ArProcess::Xi => &s.pacf_xi,
            ArProcess::Alpha => &s.pacf_alpha,
            ArProcess::Beta => &s.pacf_beta,
        }
    }

    fn pacf_mut(self, s: &mut ModelState) -> &mut PacfVector {
        match self {
            ArProcess::Eps => &mut s.pacf_eps,
            ArProcess::Xi => &mut s.pacf_xi,
            ArProcess::Alpha => &mut s.pacf_alpha,
            ArProcess::Beta => &mut s.pacf_beta,
        }
    }

    /// Innovation variance of this process.
    pub fn variance(self, s: &ModelState) -> f64 {
        match self {
            ArProcess::Eps => s.tau2_eps,
            ArProcess::Xi => s.tau2_xi,
            ArProcess::Alpha => s.sigma2_alpha,
            ArProcess::Beta => s.sigma2_beta,
        }
    }

    fn variance_mut(self, s: &mut ModelState) -> &mut f64 {
        match self {
            ArProcess::Eps => &mut s.tau2_eps,
            ArProcess::Xi => &mut s.tau2_xi,
            ArProcess::Alpha => &mut s.sigma2_alpha,
            ArProcess::Beta => &mut s.sigma2_beta,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockCounts {
    pub proposed: u64,
    pub accepted: u64,
}

impl BlockCounts {
    pub fn rate(&self) -> Option<f64> {
        (self.proposed > 0).then(|| self.accepted as f64 / self.proposed as f64)
    }
}

/// Proposal and acceptance counts per MH block, split at the end of burn-in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceLedger {
    pub burn_in: BTreeMap<String, BlockCounts>,
    pub sampling: BTreeMap<String, BlockCounts>,
}

impl AcceptanceLedger {
    fn record(&mut self, block: &str, burn_in: bool, proposed: u64, accepted: u64) {
        let map = if burn_in { &mut self.burn_in } else { &mut self.sampling };
        let e = map.entry(block.to_string()).or_default();
        e.proposed += proposed;
        e.accepted += accepted;
    }

    /// Post-burn-in acceptance rate of each block.
    pub fn sampling_rates(&self) -> BTreeMap<String, f64> {
        self.sampling.iter().filter_map(|(k, c)| c.rate().map(|r| (k.clone(), r))).collect()
    }
}

/// Adaptive random-walk scales, on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalScales {
    /// Per site `i·V + v`, one log-scale per channel.
    pub eta: Vec<[f64; 2]>,
    /// Per process, per pacf element.
    pub pacf: Vec<Vec<f64>>,
    pub log_kappa: f64,
    pub cayley: f64,
    /// Number of adaptation steps taken by each scalar block.
    pub adapt_count: BTreeMap<String, u64>,
}

/// Robbins–Monro gain `(n + 1)^−0.6` for the `n`-th adaptation step.
pub fn rm_gain(n: u64) -> f64 {
    (n as f64 + 1.0).powf(-0.6)
}

/// Moves a log proposal scale toward the target acceptance rate.
pub fn adapt_log_scale(log_scale: &mut f64, accepted: bool, target: f64, gain: f64) {
    let a = if accepted { 1.0 } else { 0.0 };
    *log_scale = (*log_scale + gain * (a - target)).clamp(LOG_SCALE_BOUNDS.0, LOG_SCALE_BOUNDS.1);
}

fn reflect_unit(mut x: f64) -> f64 {
    // A proposal several widths outside (−1, 1) folds back repeatedly.
    for _ in 0..64 {
        if x > 1.0 {
            x = 2.0 - x;
        } else if x < -1.0 {
            x = -2.0 - x;
        } else {
            break;
        }
    }
    x
}

/// Everything needed to resume a chain exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub seed: u64,
    pub config: ModelConfig,
    pub state: ModelState,
    pub scales: ProposalScales,
    pub acceptance: AcceptanceLedger,
    pub rng: ChainRng,
    pub n_subjects: usize,
    pub n_voxels: usize,
    pub n_columns: usize,
}

/// Stored post-burn-in draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorDraws {
    pub states: Vec<ModelState>,
    pub acceptance: AcceptanceLedger,
    pub seed: u64,
    pub config: ModelConfig,
    pub latent_stored: bool,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Named traces of every scalar parameter: κ, variances, pacfs, Cayley.
    pub fn scalar_traces(&self) -> Vec<(String, Vec<f64>)> {
        scalar_traces(&self.states)
    }

    /// Named traces of every regression coefficient.
    pub fn coefficient_traces(&self) -> Vec<(String, Vec<f64>)> {
        coefficient_traces(&self.states)
    }
}

pub fn scalar_traces(states: &[ModelState]) -> Vec<(String, Vec<f64>)> {
    let Some(first) = states.first() else {
        return Vec::new();
    };
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    let mut push = |name: String, f: &dyn Fn(&ModelState) -> f64| out.push((name, states.iter().map(f).collect()));
    push("kappa".into(), &|s| s.kappa);
    push("tau2_eps".into(), &|s| s.tau2_eps);
    push("tau2_xi".into(), &|s| s.tau2_xi);
    push("sigma2_alpha".into(), &|s| s.sigma2_alpha);
    push("sigma2_beta".into(), &|s| s.sigma2_beta);
    for p in ArProcess::ALL {
        for k in 0..p.pacf(first).order() {
            push(format!("pacf_{}[{}]", p.name(), k + 1), &move |s| p.pacf(s).as_slice()[k]);
        }
    }
    for k in 0..3 {
        push(format!("cayley[{}]", k + 1), &move |s| s.cayley.to_array()[k]);
    }
    out
}

pub fn coefficient_traces(states: &[ModelState]) -> Vec<(String, Vec<f64>)> {
    let Some(first) = states.first() else {
        return Vec::new();
    };
    let (nv, d) = first.alpha.shape();
    let mut out = Vec::with_capacity(2 * nv * d);
    for (name, ch) in [("alpha", Channel::Theta), ("beta", Channel::Phi)] {
        for v in 0..nv {
            for c in 0..d {
                out.push((format!("{name}[{v},{c}]"), states.iter().map(|s| s.coef(ch)[(v, c)]).collect()));
            }
        }
    }
    out
}

/// Result of updating one subject's latent row.
struct SubjectUpdate {
    theta: Vec<f64>,
    phi: Vec<f64>,
    proposed: u64,
    accepted: u64,
}

/// Immutable inputs to the `η` updates of one sweep.
struct EtaContext<'a> {
    data: &'a ModelData,
    state: &'a ModelState,
    q: Matrix3<f64>,
    resid: [&'a BlockCorrelations; 2],
}

impl EtaContext<'_> {
    /// `y_iv = Qᵀ E_iv`.
    fn rotated_obs(&self, i: usize, v: usize) -> Option<Vector3<f64>> {
        self.data.direction(i, v).map(|e| self.q.transpose() * e.as_vector())
    }

    fn lik(&self, kappa: f64, eta: [f64; 2], y: &Vector3<f64>) -> f64 {
        kappa * inverse_link(&LinkedCoords::new(eta[0], eta[1])).as_vector().dot(y)
    }

    /// Sequential site updates along every streamline of subject `i`.
    fn update_subject<R: Rng>(
        &self,
        i: usize,
        theta: &mut [f64],
        phi: &mut [f64],
        log_scales: &mut [[f64; 2]],
        adapt: Option<(f64, f64)>,
        rng_for: &mut dyn FnMut(usize) -> R,
    ) -> (u64, u64) {
        let (mut proposed, mut accepted) = (0, 0);
        let x = self.data.x_row(i);
        for fiber in self.data.atlas.fibers() {
            let fit: [Vec<f64>; 2] =
                Channel::BOTH.map(|ch| fiber.iter().map(|&v| self.state.fitted(ch, x, v)).collect());
            for (j, &v) in fiber.iter().enumerate() {
                let mut rng = rng_for(v);
                let (p, a) = self.update_site(i, v, j, fiber, &fit, theta, phi, &mut log_scales[v], adapt, &mut rng);
                proposed += p;
                accepted += a;
            }
        }
        (proposed, accepted)
    }

    /// Returns (proposed, accepted) for this site.
    #[allow(clippy::too_many_arguments)]
    fn update_site<R: Rng + ?Sized>(
        &self,
        i: usize,
        v: usize,
        j: usize,
        fiber: &[usize],
        fit: &[Vec<f64>; 2],
        theta: &mut [f64],
        phi: &mut [f64],
        log_scale: &mut [f64; 2],
        adapt: Option<(f64, f64)>,
        rng: &mut R,
    ) -> (u64, u64) {
        let rows = [&*theta, &*phi];
        // Gaussian conditional of the residual at position j: precision d/τ²,
        // linear coefficient −c/τ² from the other residuals of the block.
        let mut diag = [0.0; 2];
        let mut cross = [0.0; 2];
        for ch in Channel::BOTH {
            let k = ch.index();
            let prec = &self.resid[k].get(fiber.len()).precision;
            diag[k] = prec[(j, j)];
            cross[k] = fiber
                .iter()
                .enumerate()
                .filter(|&(l, _)| l != j)
                .map(|(l, &w)| prec[(j, l)] * (rows[k][w] - fit[k][l]))
                .sum();
        }
        let tau2 = [self.state.tau2_eps, self.state.tau2_xi];
        let current = [theta[v], phi[v]];

        let Some(y) = self.rotated_obs(i, v) else {
            let mut out = [0.0; 2];
            for k in 0..2 {
                let mean = fit[k][j] - cross[k] / diag[k];
                let sd = (tau2[k] / diag[k]).sqrt();
                out[k] = mean + sd * rng.sample::<f64, _>(StandardNormal);
            }
            theta[v] = out[0];
            phi[v] = out[1];
            return (0, 0);
        };

        let prior = |eta: [f64; 2]| -> f64 {
            (0..2)
                .map(|k| {
                    let r = eta[k] - fit[k][j];
                    -(0.5 * diag[k] * r * r + r * cross[k]) / tau2[k]
                })
                .sum()
        };
        let kappa = self.state.kappa;
        let target = |eta: [f64; 2]| self.lik(kappa, eta, &y) + prior(eta);
        let z: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let proposal = [current[0] + log_scale[0].exp() * z[0], current[1] + log_scale[1].exp() * z[1]];
        let log_ratio = target(proposal) - target(current);
        let u: f64 = rng.random();
        let accept = log_ratio.is_finite() && u.ln() < log_ratio;
        if accept {
            theta[v] = proposal[0];
            phi[v] = proposal[1];
        }
        if let Some((target_rate, gain)) = adapt {
            for ls in log_scale.iter_mut() {
                adapt_log_scale(ls, accept, target_rate, gain);
            }
        }
        let mut eta = [theta[v], phi[v]];
        for flip in [seam_flip, pole_flip] {
            let Some((next, log_jac)) = flip(eta) else { continue };
            let log_ratio = target(next) - target(eta) + log_jac;
            let u: f64 = rng.random();
            if log_ratio.is_finite() && u.ln() < log_ratio {
                eta = next;
            }
        }
        theta[v] = eta[0];
        phi[v] = eta[1];
        (1, u64::from(accept))
    }
}

/// Mirrors the azimuth across the `θ = ±π` seam: `θ̃ ↦ −θ̃`.
fn seam_flip(eta: [f64; 2]) -> Option<([f64; 2], f64)> {
    Some(([-eta[0], eta[1]], 0.0))
}

/// Turns the azimuth by a half turn, `θ ↦ θ − π·sign θ`, which moves a point
/// across the nearest pole. Returns the log Jacobian in linked coordinates.
fn pole_flip(eta: [f64; 2]) -> Option<([f64; 2], f64)> {
    let t = (0.5 * eta[0]).tanh();
    if t == 0.0 || t.abs() >= 1.0 {
        return None;
    }
    let t_new = t - t.signum();
    let log_jac = ((1.0 - t) * (1.0 + t)).ln() - ((1.0 - t_new) * (1.0 + t_new)).ln();
    Some(([2.0 * t_new.atanh(), eta[1]], log_jac))
}

/// Sampler state: current parameters, caches, adaptation and RNG.
pub struct Sampler<'a> {
    data: &'a ModelData,
    config: ModelConfig,
    seed: u64,
    state: ModelState,
    iteration: usize,
    rng: ChainRng,
    scales: ProposalScales,
    acceptance: AcceptanceLedger,
    lengths: Vec<usize>,
    corr: [BlockCorrelations; 4],
    stat: Matrix3<f64>,
    draws: Vec<ModelState>,
}

impl<'a> Sampler<'a> {
    /// Starts from the data-driven initial state.
    pub fn new(data: &'a ModelData, config: ModelConfig, seed: u64) -> Result<Self, McmcError> {
        let state = ModelState::initialize(data, &config);
        Self::with_state(data, config, seed, state)
    }

    pub fn with_state(
        data: &'a ModelData,
        config: ModelConfig,
        seed: u64,
        state: ModelState,
    ) -> Result<Self, McmcError> {
        config.validate()?;
        state.check_dimensions(data)?;
        if state.lag() != config.lag {
            return Err(McmcError::Model(ModelError::InvalidConfig(format!(
                "state has lag {}, config has {}",
                state.lag(),
                config.lag
            ))));
        }
        let scales = initial_scales(data, &config, &state);
        let lengths = data.atlas.distinct_lengths();
        let corr = build_corr(&state, &lengths)?;
        let stat = direction_statistic(&state, data);
        Ok(Self {
            data,
            seed,
            state,
            iteration: 0,
            rng: seeded_rng(derive_seed(seed, &[0x6d61_696e])),
            scales,
            acceptance: AcceptanceLedger::default(),
            lengths,
            corr,
            stat,
            draws: Vec::new(),
            config,
        })
    }

    pub fn from_checkpoint(data: &'a ModelData, ckpt: Checkpoint) -> Result<Self, McmcError> {
        if (ckpt.n_subjects, ckpt.n_voxels, ckpt.n_columns) != (data.n_subjects(), data.n_voxels(), data.n_columns()) {
            return Err(McmcError::CheckpointMismatch(format!(
                "checkpoint dimensions {:?} vs data {:?}",
                (ckpt.n_subjects, ckpt.n_voxels, ckpt.n_columns),
                (data.n_subjects(), data.n_voxels(), data.n_columns())
            )));
        }
        ckpt.config.validate()?;
        ckpt.state.check_dimensions(data)?;
        let lengths = data.atlas.distinct_lengths();
        let corr = build_corr(&ckpt.state, &lengths)?;
        let stat = direction_statistic(&ckpt.state, data);
        Ok(Self {
            data,
            config: ckpt.config,
            seed: ckpt.seed,
            state: ckpt.state,
            iteration: ckpt.iteration,
            rng: ckpt.rng,
            scales: ckpt.scales,
            acceptance: ckpt.acceptance,
            lengths,
            corr,
            stat,
            draws: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.iteration,
            seed: self.seed,
            config: self.config.clone(),
            state: self.state.clone(),
            scales: self.scales.clone(),
            acceptance: self.acceptance.clone(),
            rng: self.rng.clone(),
            n_subjects: self.data.n_subjects(),
            n_voxels: self.data.n_voxels(),
            n_columns: self.data.n_columns(),
        }
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    /// Replaces the state and refreshes every cache.
    pub fn set_state(&mut self, state: ModelState) -> Result<(), McmcError> {
        state.check_dimensions(self.data)?;
        self.corr = build_corr(&state, &self.lengths)?;
        self.stat = direction_statistic(&state, self.data);
        self.state = state;
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn acceptance(&self) -> &AcceptanceLedger {
        &self.acceptance
    }

    pub fn scales(&self) -> &ProposalScales {
        &self.scales
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.total
    }

    fn in_burn_in(&self) -> bool {
        self.iteration < self.config.burn_in
    }

    fn adapting(&self) -> bool {
        self.config.adapt && self.in_burn_in()
    }

    /// One full sweep. Returns the state if this iteration is stored.
    pub fn step(&mut self) -> Result<Option<ModelState>, McmcError> {
        self.sweep_eta()?;
        for ch in Channel::BOTH {
            self.gibbs_coefficients(ch)?;
        }
        self.gibbs_variances()?;
        for p in ArProcess::ALL {
            for k in 0..self.config.lag {
                self.update_pacf(p, k, self.adapting())?;
            }
        }
        self.update_log_kappa(self.adapting())?;
        self.update_cayley(self.adapting())?;
        self.iteration += 1;

        let t = self.iteration;
        let keep = t > self.config.burn_in && (t - self.config.burn_in).is_multiple_of(self.config.thin);
        if !keep {
            return Ok(None);
        }
        let mut s = self.state.clone();
        if !self.config.store_latent {
            s.eta_theta = DMatrix::zeros(0, 0);
            s.eta_phi = DMatrix::zeros(0, 0);
        }
        Ok(Some(s))
    }

    /// Runs to `config.total`, calling `on_draw` for each stored draw.
    pub fn run_with(&mut self, mut on_draw: impl FnMut(usize, &ModelState)) -> Result<(), McmcError> {
        self.run_until(self.config.total, &mut on_draw)
    }

    /// Runs until `iteration == until` (capped at the configured total).
    pub fn run_until(&mut self, until: usize, on_draw: &mut dyn FnMut(usize, &ModelState)) -> Result<(), McmcError> {
        let until = until.min(self.config.total);
        while self.iteration < until {
            if let Some(s) = self.step()? {
                on_draw(self.iteration, &s);
                self.draws.push(s);
            }
        }
        Ok(())
    }

    pub fn into_draws(self) -> PosteriorDraws {
        PosteriorDraws {
            states: self.draws,
            acceptance: self.acceptance,
            seed: self.seed,
            latent_stored: self.config.store_latent,
            config: self.config,
        }
    }

    fn corr(&self, p: ArProcess) -> &BlockCorrelations {
        &self.corr[p.index()]
    }

    // ---- η ----

    fn eta_context(&self) -> EtaContext<'_> {
        EtaContext {
            data: self.data,
            state: &self.state,
            q: *cayley_to_rotation(&self.state.cayley).matrix(),
            resid: [self.corr(ArProcess::Eps), self.corr(ArProcess::Xi)],
        }
    }

    fn sweep_eta(&mut self) -> Result<(), McmcError> {
        let n = self.data.n_subjects();
        let nv = self.data.n_voxels();
        let adapt = self.adapting().then(|| (self.config.target_acceptance, rm_gain(self.iteration as u64)));
        let (seed, t) = (self.seed, self.iteration as u64);
        let mut scales = std::mem::take(&mut self.scales.eta);
        let updates: Vec<SubjectUpdate> = {
            let ctx = self.eta_context();
            scales
                .par_chunks_mut(nv)
                .enumerate()
                .map(|(i, log_scales)| {
                    let mut theta: Vec<f64> = ctx.state.eta_theta.row(i).iter().copied().collect();
                    let mut phi: Vec<f64> = ctx.state.eta_phi.row(i).iter().copied().collect();
                    let mut rng_for = |v: usize| derived_rng(seed, &[t, i as u64, v as u64]);
                    let (proposed, accepted) =
                        ctx.update_subject(i, &mut theta, &mut phi, log_scales, adapt, &mut rng_for);
                    SubjectUpdate { theta, phi, proposed, accepted }
                })
                .collect()
        };
        self.scales.eta = scales;
        let (mut proposed, mut accepted) = (0, 0);
        for (i, u) in updates.into_iter().enumerate().take(n) {
            for v in 0..nv {
                self.state.eta_theta[(i, v)] = u.theta[v];
                self.state.eta_phi[(i, v)] = u.phi[v];
            }
            proposed += u.proposed;
            accepted += u.accepted;
        }
        self.acceptance.record("eta", self.in_burn_in(), proposed, accepted);
        if self.state.eta_theta.iter().chain(self.state.eta_phi.iter()).any(|x| !x.is_finite()) {
            return Err(self.non_finite("eta"));
        }
        self.stat = direction_statistic(&self.state, self.data);
        Ok(())
    }

    /// A single random-walk (or exact, if masked) update of `η_iv` using the
    /// main RNG. With `adapt`, the site's scales move by Robbins–Monro.
    pub fn update_eta_site(&mut self, i: usize, v: usize, adapt: bool) -> bool {
        let (k, j) = self.data.atlas.locate(v);
        let fiber = self.data.atlas.fiber(k).to_vec();
        let nv = self.data.n_voxels();
        let mut theta: Vec<f64> = self.state.eta_theta.row(i).iter().copied().collect();
        let mut phi: Vec<f64> = self.state.eta_phi.row(i).iter().copied().collect();
        let old_mu = self.state.mu(i, v);
        let counter = self.scales.adapt_count.entry("eta_site".into()).or_insert(0);
        let gain = rm_gain(*counter);
        if adapt {
            *counter += 1;
        }
        let adapt = adapt.then_some((self.config.target_acceptance, gain));
        let mut log_scale = self.scales.eta[i * nv + v];
        let mut rng = self.rng.clone();
        let accepted = {
            let ctx = self.eta_context();
            let x = self.data.x_row(i);
            let fit: [Vec<f64>; 2] =
                Channel::BOTH.map(|ch| fiber.iter().map(|&w| ctx.state.fitted(ch, x, w)).collect());
            let (_, a) = ctx.update_site(i, v, j, &fiber, &fit, &mut theta, &mut phi, &mut log_scale, adapt, &mut rng);
            a == 1
        };
        self.rng = rng;
        self.scales.eta[i * nv + v] = log_scale;
        self.state.eta_theta[(i, v)] = theta[v];
        self.state.eta_phi[(i, v)] = phi[v];
        if let Some(e) = self.data.direction(i, v) {
            let new_mu = self.state.mu(i, v);
            self.stat += (new_mu.as_vector() - old_mu.as_vector()) * e.as_vector().transpose();
        }
        accepted
    }

    // ---- coefficients ----

    /// Mean and covariance of the exact conditional of all coefficients of
    /// fiber `k` in channel `ch`, stacked column by column (`c` outer, voxel
    /// position inner).
    pub fn coefficient_conditional(&self, ch: Channel, k: usize) -> Result<(DVector<f64>, DMatrix<f64>), McmcError> {
        let (prec, b) = self.coefficient_precision(ch, k);
        let chol = prec.cholesky().ok_or_else(|| self.non_finite("coefficients"))?;
        let mean = chol.solve(&b);
        Ok((mean, chol.inverse()))
    }

    fn coefficient_precision(&self, ch: Channel, k: usize) -> (DMatrix<f64>, DVector<f64>) {
        let fiber = self.data.atlas.fiber(k);
        let n = fiber.len();
        let d = self.data.n_columns();
        let x = &self.data.design.x;
        let p_coef = &self.corr(ArProcess::coef(ch)).get(n).precision / self.state.sigma2(ch);
        let p_res = &self.corr(ArProcess::resid(ch)).get(n).precision / self.state.tau2(ch);
        let gram = x.transpose() * x;
        let mut lambda = DMatrix::zeros(n * d, n * d);
        for c1 in 0..d {
            for c2 in 0..d {
                let mut block = &p_res * gram[(c1, c2)];
                if c1 == c2 {
                    block += &p_coef;
                }
                lambda.view_mut((c1 * n, c2 * n), (n, n)).copy_from(&block);
            }
        }
        let eta = self.state.eta(ch);
        let m = DMatrix::from_fn(n, d, |j, c| (0..x.nrows()).map(|i| eta[(i, fiber[j])] * x[(i, c)]).sum());
        let pm = &p_res * m;
        let b = DVector::from_iterator(n * d, pm.iter().copied());
        (lambda, b)
    }

    fn gibbs_coefficients(&mut self, ch: Channel) -> Result<(), McmcError> {
        let d = self.data.n_columns();
        for k in 0..self.data.atlas.n_fibers() {
            let (prec, b) = self.coefficient_precision(ch, k);
            let chol = prec.cholesky().ok_or_else(|| self.non_finite("coefficients"))?;
            let mean = chol.solve(&b);
            let z = DVector::from_fn(b.len(), |_, _| self.rng.sample::<f64, _>(StandardNormal));
            let l = chol.l();
            let noise = l.transpose().solve_upper_triangular(&z).ok_or_else(|| self.non_finite("coefficients"))?;
            let draw = mean + noise;
            let fiber = self.data.atlas.fiber(k).to_vec();
            let n = fiber.len();
            let coef = self.state.coef_mut(ch);
            for c in 0..d {
                for (j, &v) in fiber.iter().enumerate() {
                    coef[(v, c)] = draw[c * n + j];
                }
            }
        }
        if self.state.coef(ch).iter().any(|x| !x.is_finite()) {
            return Err(self.non_finite("coefficients"));
        }
        Ok(())
    }

    // ---- variances ----

    /// Shape and rate of the inverse-gamma conditional of a variance.
    pub fn variance_conditional(&self, p: ArProcess) -> (f64, f64) {
        let ch = p.channel();
        let mut quad = 0.0;
        let mut count = 0usize;
        for fiber in self.data.atlas.fibers() {
            let corr = &self.corr(p).get(fiber.len()).corr;
            if p.is_random_effect() {
                for i in 0..self.data.n_subjects() {
                    quad += corr.quad_form(&self.state.residual(ch, self.data, i, fiber));
                    count += fiber.len();
                }
            } else {
                for c in 0..self.data.n_columns() {
                    let a: Vec<f64> = fiber.iter().map(|&v| self.state.coef(ch)[(v, c)]).collect();
                    quad += corr.quad_form(&a);
                    count += fiber.len();
                }
            }
        }
        (IG_SHAPE + count as f64 / 2.0, IG_RATE + quad / 2.0)
    }

    fn gibbs_variances(&mut self) -> Result<(), McmcError> {
        for p in ArProcess::ALL {
            let (shape, rate) = self.variance_conditional(p);
            let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(&mut self.rng);
            let value = rate / g;
            if !(value.is_finite() && value > 0.0) {
                return Err(self.non_finite("variances"));
            }
            *p.variance_mut(&mut self.state) = value;
        }
        Ok(())
    }

    // ---- pacf ----

    /// Vectors governed by a process, one per (subject or column, fiber).
    fn process_vectors(&self, p: ArProcess) -> Vec<Vec<f64>> {
        let ch = p.channel();
        let mut out = Vec::new();
        for fiber in self.data.atlas.fibers() {
            if p.is_random_effect() {
                for i in 0..self.data.n_subjects() {
                    out.push(self.state.residual(ch, self.data, i, fiber));
                }
            } else {
                for c in 0..self.data.n_columns() {
                    out.push(fiber.iter().map(|&v| self.state.coef(ch)[(v, c)]).collect());
                }
            }
        }
        out
    }

    fn process_log_density(corr: &BlockCorrelations, vectors: &[Vec<f64>], variance: f64) -> f64 {
        vectors.iter().map(|x| corr.get(x.len()).corr.log_density(x, variance)).sum()
    }

    /// Log conditional density (up to a constant) of a process's pacf.
    pub fn pacf_log_conditional(&self, p: ArProcess, pacf: &PacfVector) -> Option<f64> {
        let corr = BlockCorrelations::new(pacf, &self.lengths).ok()?;
        Some(Self::process_log_density(&corr, &self.process_vectors(p), p.variance(&self.state)))
    }

    /// Reflected random-walk update of element `k` of a process's pacf.
    pub fn update_pacf(&mut self, p: ArProcess, k: usize, adapt: bool) -> Result<bool, McmcError> {
        let vectors = self.process_vectors(p);
        let variance = p.variance(&self.state);
        let current = Self::process_log_density(self.corr(p), &vectors, variance);
        if !current.is_finite() {
            return Err(self.non_finite(p.block_name()));
        }
        let step = self.scales.pacf[p.index()][k].exp();
        let z: f64 = self.rng.sample(StandardNormal);
        let u: f64 = self.rng.random();
        let rho = p.pacf(&self.state).as_slice()[k];
        let proposed = reflect_unit(rho + step * z);
        let mut accepted = false;
        if proposed.abs() < 1.0 {
            let mut pacf = p.pacf(&self.state).clone();
            pacf.set(k, proposed);
            if let Ok(corr) = BlockCorrelations::new(&pacf, &self.lengths) {
                let new = Self::process_log_density(&corr, &vectors, variance);
                if new.is_finite() && u.ln() < new - current {
                    *p.pacf_mut(&mut self.state) = pacf;
                    self.corr[p.index()] = corr;
                    accepted = true;
                }
            }
        }
        self.acceptance.record(p.block_name(), self.in_burn_in(), 1, u64::from(accepted));
        if adapt {
            let key = format!("{}[{k}]", p.block_name());
            let gain = self.next_gain(&key);
            adapt_log_scale(&mut self.scales.pacf[p.index()][k], accepted, self.config.target_acceptance, gain);
        }
        Ok(accepted)
    }

    fn next_gain(&mut self, key: &str) -> f64 {
        let n = self.scales.adapt_count.entry(key.to_string()).or_insert(0);
        let g = rm_gain(*n);
        *n += 1;
        g
    }

    // ---- κ ----

    /// `n_obs log C₃(κ) + κ tr(Q S)`: the likelihood as a function of κ.
    pub fn kappa_log_likelihood(&self, kappa: f64) -> f64 {
        let q = cayley_to_rotation(&self.state.cayley);
        self.data.n_observed() as f64 * log_normalizer_3(kappa) + kappa * (q.matrix() * self.stat).trace()
    }

    pub fn update_log_kappa(&mut self, adapt: bool) -> Result<bool, McmcError> {
        let kappa = self.state.kappa;
        let current = self.kappa_log_likelihood(kappa) + kappa.ln();
        if !current.is_finite() {
            return Err(self.non_finite("log_kappa"));
        }
        let z: f64 = self.rng.sample(StandardNormal);
        let u: f64 = self.rng.random();
        let proposed = kappa * (self.scales.log_kappa.exp() * z).exp();
        let mut accepted = false;
        if proposed > 0.0 && proposed <= self.config.kappa_max {
            let new = self.kappa_log_likelihood(proposed) + proposed.ln();
            if new.is_finite() && u.ln() < new - current {
                self.state.kappa = proposed;
                accepted = true;
            }
        }
        self.acceptance.record("log_kappa", self.in_burn_in(), 1, u64::from(accepted));
        if adapt {
            let gain = self.next_gain("log_kappa");
            adapt_log_scale(&mut self.scales.log_kappa, accepted, self.config.target_acceptance, gain);
        }
        Ok(accepted)
    }

    // ---- Q ----

    /// `κ tr(Q(a) S)` plus the normal prior on `a`.
    pub fn cayley_log_conditional(&self, a: &CayleyParams) -> f64 {
        let q = cayley_to_rotation(a);
        self.state.kappa * (q.matrix() * self.stat).trace() + cayley_log_prior(a)
    }

    pub fn update_cayley(&mut self, adapt: bool) -> Result<bool, McmcError> {
        let current = self.cayley_log_conditional(&self.state.cayley);
        if !current.is_finite() {
            return Err(self.non_finite("cayley"));
        }
        let step = self.scales.cayley.exp();
        let a = self.state.cayley.to_array();
        let z: [f64; 3] =
            [self.rng.sample(StandardNormal), self.rng.sample(StandardNormal), self.rng.sample(StandardNormal)];
        let u: f64 = self.rng.random();
        let proposal = CayleyParams::new(a[0] + step * z[0], a[1] + step * z[1], a[2] + step * z[2]);
        let new = self.cayley_log_conditional(&proposal);
        let accepted = new.is_finite() && u.ln() < new - current;
        if accepted {
            self.state.cayley = proposal;
        }
        self.acceptance.record("cayley", self.in_burn_in(), 1, u64::from(accepted));
        if adapt {
            let gain = self.next_gain("cayley");
            adapt_log_scale(&mut self.scales.cayley, accepted, self.config.target_acceptance, gain);
        }
        Ok(accepted)
    }

    fn non_finite(&self, block: &'static str) -> McmcError {
        McmcError::NonFiniteLogPosterior { block, iteration: self.iteration }
    }
}

fn build_corr(state: &ModelState, lengths: &[usize]) -> Result<[BlockCorrelations; 4], McmcError> {
    let mk = |p: ArProcess| BlockCorrelations::new(p.pacf(state), lengths).map_err(ModelError::from);
    Ok([mk(ArProcess::Eps)?, mk(ArProcess::Xi)?, mk(ArProcess::Alpha)?, mk(ArProcess::Beta)?])
}

/// Starting scales: the configured step, with the `η` channels shrunk where
/// the inverse link is steep at the initial state.
fn initial_scales(data: &ModelData, config: &ModelConfig, state: &ModelState) -> ProposalScales {
    let (n, nv) = (data.n_subjects(), data.n_voxels());
    let mut eta = Vec::with_capacity(n * nv);
    for i in 0..n {
        for v in 0..nv {
            let (_, dt, dp) = crate::link::inverse_link_with_jacobian(&state.linked(i, v));
            let scale = |g: f64| (config.steps.eta / g.max(0.05)).min(config.steps.eta * 20.0).ln();
            eta.push([scale(dt.norm()), scale(dp.norm())]);
        }
    }
    ProposalScales {
        eta,
        pacf: vec![vec![config.steps.pacf.ln(); config.lag]; 4],
        log_kappa: config.steps.log_kappa.ln(),
        cayley: config.steps.cayley.ln(),
        adapt_count: BTreeMap::new(),
    }
}

/// Runs a full chain from the data-driven initial state.
pub fn fit(data: &ModelData, config: &ModelConfig, seed: u64) -> Result<PosteriorDraws, McmcError> {
    let mut sampler = Sampler::new(data, config.clone(), seed)?;
    sampler.run_with(|_, _| {})?;
    Ok(sampler.into_draws())
}
