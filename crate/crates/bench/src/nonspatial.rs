//! vMF regression without spatial random effects: `QᵀE_iv ~ vMF(μ_iv, κ)`
//! with `ℓ(μ_iv) = (X_i α_v, X_i β_v)` and independent normal coefficients.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vmfreg_core::geometry::{cayley_to_rotation, CayleyParams, Rotation3};
use vmfreg_core::link::{inverse_link, link, LinkedCoords};
use vmfreg_core::mcmc::{adapt_log_scale, rm_gain};
use vmfreg_core::model::{cayley_log_prior, ModelData, IG_RATE, IG_SHAPE};
use vmfreg_core::rng::{derived_rng, ChainRng};
use vmfreg_core::vmf::log_normalizer_3;
use vmfreg_core::UnitVector3;

#[derive(Debug, Error)]
pub enum NonSpatialError {
    #[error("non-finite log-posterior in block {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonSpatialConfig {
    pub total: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub target_acceptance: f64,
    pub kappa_init: f64,
    pub kappa_max: f64,
    /// Initial random-walk step of every coefficient.
    pub coef_step: f64,
    pub log_kappa_step: f64,
    pub cayley_step: f64,
}

impl Default for NonSpatialConfig {
    fn default() -> Self {
        Self {
            total: 5000,
            burn_in: 2000,
            thin: 1,
            target_acceptance: 0.3,
            kappa_init: 10.0,
            kappa_max: 1e6,
            coef_step: 0.05,
            log_kappa_step: 0.1,
            cayley_step: 0.01,
        }
    }
}

impl NonSpatialConfig {
    fn validate(&self) -> Result<(), NonSpatialError> {
        if self.total == 0 || self.thin == 0 || self.burn_in >= self.total {
            return Err(NonSpatialError::InvalidConfig(format!(
                "need total > burn_in and thin ≥ 1 (total {}, burn_in {}, thin {})",
                self.total, self.burn_in, self.thin
            )));
        }
        if !(self.kappa_init > 0.0 && self.kappa_init <= self.kappa_max) {
            return Err(NonSpatialError::InvalidConfig("kappa_init must lie in (0, kappa_max]".into()));
        }
        Ok(())
    }

    fn keep(&self, t: usize) -> bool {
        t > self.burn_in && (t - self.burn_in).is_multiple_of(self.thin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonSpatialState {
    /// `V × D` coefficients of the `θ̃` equation.
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
    pub kappa: f64,
    pub cayley: CayleyParams,
}

impl NonSpatialState {
    pub fn rotation(&self) -> Rotation3 {
        cayley_to_rotation(&self.cayley)
    }

    pub fn mu(&self, x: &DVector<f64>, v: usize) -> UnitVector3 {
        let theta = self.alpha.row(v).transpose().dot(x);
        let phi = self.beta.row(v).transpose().dot(x);
        inverse_link(&LinkedCoords::new(theta, phi))
    }

    /// Direct mode `Q μ` for covariate row `x` at voxel `v`.
    pub fn mode(&self, x: &DVector<f64>, v: usize) -> UnitVector3 {
        self.mu(x, v).rotate(&self.rotation())
    }
}

#[derive(Debug, Clone)]
pub struct NonSpatialDraws {
    pub states: Vec<NonSpatialState>,
    /// Sampling-phase acceptance rates of the coefficient, `log κ` and Cayley blocks.
    pub acceptance: [f64; 3],
}

/// Per-voxel adaptive random-walk proposal for `(α_v, β_v)`.
#[derive(Debug, Clone)]
struct VoxelProposal {
    log_scale: f64,
    chol: DMatrix<f64>,
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl VoxelProposal {
    fn new(dim: usize, step: f64) -> Self {
        Self {
            log_scale: step.ln(),
            chol: DMatrix::identity(dim, dim),
            n: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    fn observe(&mut self, x: &DVector<f64>) {
        self.n += 1;
        let delta = x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    /// Switches the proposal shape to the Cholesky factor of the running
    /// sample covariance and resets the scale to `2.38/√dim`.
    fn refresh_shape(&mut self) {
        let dim = self.mean.len();
        if self.n < 2 * dim + 10 {
            return;
        }
        let mut cov = &self.m2 / (self.n - 1) as f64;
        let avg = cov.trace() / dim as f64;
        for k in 0..dim {
            cov[(k, k)] += 1e-6 * avg.max(1e-12);
        }
        if let Some(c) = Cholesky::<f64, Dyn>::new(cov) {
            self.chol = c.l();
            self.log_scale = (2.38 / (dim as f64).sqrt()).ln();
        }
    }
}

struct Sampler<'a> {
    data: &'a ModelData,
    cfg: NonSpatialConfig,
    state: NonSpatialState,
    rng: ChainRng,
    /// `Σ_i μ_iv E_ivᵀ` per voxel.
    stat: Vec<Matrix3<f64>>,
    proposals: Vec<VoxelProposal>,
    gains: [u64; 3],
    counts: [[u64; 2]; 3],
    log_kappa_step: f64,
    cayley_step: f64,
    d: usize,
}

impl<'a> Sampler<'a> {
    fn voxel_stat(&self, alpha: &[f64], beta: &[f64], v: usize) -> Matrix3<f64> {
        let mut s = Matrix3::zeros();
        for i in 0..self.data.n_subjects() {
            if let Some(e) = self.data.direction(i, v) {
                let x = self.data.x_row(i);
                let th: f64 = x.iter().zip(alpha).map(|(a, b)| a * b).sum();
                let ph: f64 = x.iter().zip(beta).map(|(a, b)| a * b).sum();
                let mu = inverse_link(&LinkedCoords::new(th, ph));
                s += mu.as_vector() * e.as_vector().transpose();
            }
        }
        s
    }

    fn total_stat(&self) -> Matrix3<f64> {
        self.stat.iter().sum()
    }

    fn n_obs(&self) -> usize {
        self.data.n_observed()
    }

    fn coef_log_prior(&self, alpha: &[f64], beta: &[f64]) -> f64 {
        let qa: f64 = alpha.iter().map(|a| a * a).sum();
        let qb: f64 = beta.iter().map(|b| b * b).sum();
        -0.5 * qa / self.state.sigma2_alpha - 0.5 * qb / self.state.sigma2_beta
    }

    fn update_voxel(&mut self, v: usize, adapt: bool) -> Result<bool, NonSpatialError> {
        let d = self.d;
        let q = *self.state.rotation().matrix();
        let alpha: Vec<f64> = self.state.alpha.row(v).iter().copied().collect();
        let beta: Vec<f64> = self.state.beta.row(v).iter().copied().collect();
        let kappa = self.state.kappa;
        let target =
            |s: &Self, a: &[f64], b: &[f64], stat: &Matrix3<f64>| kappa * (q * stat).trace() + s.coef_log_prior(a, b);
        let current = target(self, &alpha, &beta, &self.stat[v]);
        if !current.is_finite() {
            return Err(NonSpatialError::NonFinite("coefficients"));
        }
        let prop = &self.proposals[v];
        let z = DVector::from_fn(2 * d, |_, _| self.rng.sample::<f64, _>(StandardNormal));
        let step = &prop.chol * z * prop.log_scale.exp();
        let new_a: Vec<f64> = (0..d).map(|c| alpha[c] + step[c]).collect();
        let new_b: Vec<f64> = (0..d).map(|c| beta[c] + step[d + c]).collect();
        let new_stat = self.voxel_stat(&new_a, &new_b, v);
        let proposed = target(self, &new_a, &new_b, &new_stat);
        let u: f64 = self.rng.random();
        let accepted = proposed.is_finite() && u.ln() < proposed - current;
        let (mut a, b, mut stat, cur) =
            if accepted { (new_a, new_b, new_stat, proposed) } else { (alpha, beta, self.stat[v], current) };
        // Mirror across the azimuth seam: α_v ↦ −α_v; the prior is symmetric.
        let flip_a: Vec<f64> = a.iter().map(|x| -x).collect();
        let flip_stat = self.voxel_stat(&flip_a, &b, v);
        let flipped = target(self, &flip_a, &b, &flip_stat);
        let u: f64 = self.rng.random();
        if flipped.is_finite() && u.ln() < flipped - cur {
            a = flip_a;
            stat = flip_stat;
        }
        for c in 0..d {
            self.state.alpha[(v, c)] = a[c];
            self.state.beta[(v, c)] = b[c];
        }
        self.stat[v] = stat;
        if adapt {
            let gain = rm_gain(self.gains[0] / self.data.n_voxels().max(1) as u64);
            self.gains[0] += 1;
            let p = &mut self.proposals[v];
            adapt_log_scale(&mut p.log_scale, accepted, self.cfg.target_acceptance, gain);
            let x = DVector::from_iterator(2 * d, a.iter().chain(&b).copied());
            p.observe(&x);
        }
        Ok(accepted)
    }

    fn gibbs_variances(&mut self) {
        let v = self.state.alpha.len() as f64;
        for (coef, target) in [(&self.state.alpha, 0usize), (&self.state.beta, 1usize)] {
            let quad: f64 = coef.iter().map(|x| x * x).sum();
            let shape = IG_SHAPE + 0.5 * v;
            let rate = IG_RATE + 0.5 * quad;
            let precision = Gamma::new(shape, 1.0 / rate).expect("positive shape and rate").sample(&mut self.rng);
            let s2 = 1.0 / precision;
            if target == 0 {
                self.state.sigma2_alpha = s2;
            } else {
                self.state.sigma2_beta = s2;
            }
        }
    }

    fn kappa_log_lik(&self, kappa: f64, tr: f64) -> f64 {
        self.n_obs() as f64 * log_normalizer_3(kappa) + kappa * tr
    }

    fn update_kappa(&mut self, adapt: bool) -> Result<bool, NonSpatialError> {
        let tr = (self.state.rotation().matrix() * self.total_stat()).trace();
        let k = self.state.kappa;
        let current = self.kappa_log_lik(k, tr) + k.ln();
        if !current.is_finite() {
            return Err(NonSpatialError::NonFinite("log_kappa"));
        }
        let z: f64 = self.rng.sample(StandardNormal);
        let u: f64 = self.rng.random();
        let proposed = k * (self.log_kappa_step.exp() * z).exp();
        let mut accepted = false;
        if proposed > 0.0 && proposed <= self.cfg.kappa_max {
            let new = self.kappa_log_lik(proposed, tr) + proposed.ln();
            if new.is_finite() && u.ln() < new - current {
                self.state.kappa = proposed;
                accepted = true;
            }
        }
        if adapt {
            let gain = rm_gain(self.gains[1]);
            self.gains[1] += 1;
            adapt_log_scale(&mut self.log_kappa_step, accepted, self.cfg.target_acceptance, gain);
        }
        Ok(accepted)
    }

    fn update_cayley(&mut self, adapt: bool) -> Result<bool, NonSpatialError> {
        let s = self.total_stat();
        let cond =
            |a: &CayleyParams, kappa: f64| kappa * (cayley_to_rotation(a).matrix() * s).trace() + cayley_log_prior(a);
        let current = cond(&self.state.cayley, self.state.kappa);
        if !current.is_finite() {
            return Err(NonSpatialError::NonFinite("cayley"));
        }
        let step = self.cayley_step.exp();
        let a = self.state.cayley.to_array();
        let z: [f64; 3] =
            [self.rng.sample(StandardNormal), self.rng.sample(StandardNormal), self.rng.sample(StandardNormal)];
        let u: f64 = self.rng.random();
        let proposal = CayleyParams::new(a[0] + step * z[0], a[1] + step * z[1], a[2] + step * z[2]);
        let new = cond(&proposal, self.state.kappa);
        let accepted = new.is_finite() && u.ln() < new - current;
        if accepted {
            self.state.cayley = proposal;
        }
        if adapt {
            let gain = rm_gain(self.gains[2]);
            self.gains[2] += 1;
            adapt_log_scale(&mut self.cayley_step, accepted, self.cfg.target_acceptance, gain);
        }
        Ok(accepted)
    }
}

/// Ridge least-squares start on the clamped link coordinates of the data.
fn initial_coefficients(data: &ModelData) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = data.n_columns();
    let nv = data.n_voxels();
    let mut alpha = DMatrix::zeros(nv, d);
    let mut beta = DMatrix::zeros(nv, d);
    for v in 0..nv {
        let obs: Vec<usize> = (0..data.n_subjects()).filter(|&i| data.direction(i, v).is_some()).collect();
        if obs.is_empty() {
            continue;
        }
        let x = DMatrix::from_fn(obs.len(), d, |r, c| data.x_row(obs[r])[c]);
        let mut y = DMatrix::zeros(obs.len(), 2);
        for (r, &i) in obs.iter().enumerate() {
            let l = link(data.direction(i, v).unwrap());
            y[(r, 0)] = l.theta_tilde.clamp(-8.0, 8.0);
            y[(r, 1)] = l.phi_tilde.clamp(-8.0, 8.0);
        }
        let gram = x.transpose() * &x + DMatrix::identity(d, d) * 1e-2;
        let coef = gram.cholesky().expect("ridge gram is positive definite").solve(&(x.transpose() * y));
        for c in 0..d {
            alpha[(v, c)] = coef[(c, 0)];
            beta[(v, c)] = coef[(c, 1)];
        }
    }
    (alpha, beta)
}

pub fn fit_vmf_nonspatial(
    data: &ModelData,
    cfg: &NonSpatialConfig,
    seed: u64,
) -> Result<NonSpatialDraws, NonSpatialError> {
    cfg.validate()?;
    let d = data.n_columns();
    let nv = data.n_voxels();
    let (alpha, beta) = initial_coefficients(data);
    let var = |m: &DMatrix<f64>| (m.iter().map(|x| x * x).sum::<f64>() / m.len().max(1) as f64).max(0.1);
    let state = NonSpatialState {
        sigma2_alpha: var(&alpha),
        sigma2_beta: var(&beta),
        alpha,
        beta,
        kappa: cfg.kappa_init,
        cayley: CayleyParams::new(0.0, 0.0, 0.0),
    };
    let mut s = Sampler {
        data,
        cfg: cfg.clone(),
        state,
        rng: derived_rng(seed, &[0x6e73_7066]),
        stat: Vec::new(),
        proposals: (0..nv).map(|_| VoxelProposal::new(2 * d, cfg.coef_step)).collect(),
        gains: [0; 3],
        counts: [[0; 2]; 3],
        log_kappa_step: cfg.log_kappa_step.ln(),
        cayley_step: cfg.cayley_step.ln(),
        d,
    };
    s.stat = (0..nv)
        .map(|v| {
            let a: Vec<f64> = s.state.alpha.row(v).iter().copied().collect();
            let b: Vec<f64> = s.state.beta.row(v).iter().copied().collect();
            s.voxel_stat(&a, &b, v)
        })
        .collect();
    let mut states = Vec::new();
    let refresh_every = 100;
    for t in 1..=cfg.total {
        let adapt = t <= cfg.burn_in;
        let sampling = !adapt;
        for v in 0..nv {
            let acc = s.update_voxel(v, adapt)?;
            if sampling {
                s.counts[0][0] += 1;
                s.counts[0][1] += u64::from(acc);
            }
        }
        if adapt && t % refresh_every == 0 && t + refresh_every <= cfg.burn_in {
            for p in &mut s.proposals {
                p.refresh_shape();
            }
        }
        s.gibbs_variances();
        let acc = s.update_kappa(adapt)?;
        if sampling {
            s.counts[1][0] += 1;
            s.counts[1][1] += u64::from(acc);
        }
        let acc = s.update_cayley(adapt)?;
        if sampling {
            s.counts[2][0] += 1;
            s.counts[2][1] += u64::from(acc);
        }
        if cfg.keep(t) {
            states.push(s.state.clone());
        }
    }
    let rate = |c: [u64; 2]| if c[0] == 0 { 0.0 } else { c[1] as f64 / c[0] as f64 };
    Ok(NonSpatialDraws { states, acceptance: [rate(s.counts[0]), rate(s.counts[1]), rate(s.counts[2])] })
}

impl NonSpatialDraws {
    /// Direct mode draws for covariate row `x` at voxel `v`.
    pub fn mode_draws(&self, x: &DVector<f64>, v: usize) -> Vec<UnitVector3> {
        self.states.iter().map(|s| s.mode(x, v)).collect()
    }
}
