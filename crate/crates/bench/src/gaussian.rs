//! Conjugate multivariate Gaussian regressions used as comparators: one on
//! the Cartesian directions and one on their link coordinates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use vmfreg_core::link::{inverse_link, link, LinkedCoords};
use vmfreg_core::model::ModelData;
use vmfreg_core::rng::{derived_rng, ChainRng};
use vmfreg_core::UnitVector3;

/// Prior variance of every regression coefficient.
pub const COEF_PRIOR_VAR: f64 = 1000.0;
/// Wishart degrees of freedom of the error precision prior (scale I).
pub const WISHART_DF: f64 = 5.0;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("design restricted to the subjects observed at voxel {voxel} is rank deficient")]
    RankDeficient { voxel: usize },
    #[error("numerical failure: {0}")]
    Numerical(&'static str),
}

/// Which response the regression models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    /// The unit vector itself, `E ∈ ℝ³`.
    Cartesian,
    /// Its link coordinates, `ℓ(E) ∈ ℝ²`.
    Linked,
}

impl Response {
    pub fn dim(self) -> usize {
        match self {
            Self::Cartesian => 3,
            Self::Linked => 2,
        }
    }

    fn encode(self, e: &UnitVector3) -> DVector<f64> {
        match self {
            Self::Cartesian => DVector::from_column_slice(e.as_vector().as_slice()),
            Self::Linked => {
                let l = link(e);
                DVector::from_vec(vec![l.theta_tilde, l.phi_tilde])
            }
        }
    }

    /// Unit direction of a predicted mean: normalization for Cartesian
    /// responses, the inverse link for linked ones.
    pub fn decode(self, m: &DVector<f64>) -> Option<UnitVector3> {
        match self {
            Self::Cartesian => UnitVector3::new(m[0], m[1], m[2]).ok(),
            Self::Linked => Some(inverse_link(&LinkedCoords::new(m[0], m[1]))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsConfig {
    pub total: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        Self { total: 5000, burn_in: 2000, thin: 1 }
    }
}

impl GibbsConfig {
    pub fn keep(&self, t: usize) -> bool {
        t > self.burn_in && (t - self.burn_in).is_multiple_of(self.thin.max(1))
    }
}

/// One posterior draw: coefficients per voxel (`D × p`) and the error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub coef: Vec<DMatrix<f64>>,
    pub sigma: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianDraws {
    pub response: Response,
    pub states: Vec<GaussianState>,
}

impl GaussianDraws {
    /// Posterior mean of the predicted response mean at voxel `v`.
    pub fn mean_prediction(&self, x: &DVector<f64>, v: usize) -> DVector<f64> {
        let p = self.response.dim();
        let mut acc = DVector::zeros(p);
        for s in &self.states {
            acc += s.coef[v].transpose() * x;
        }
        acc / self.states.len() as f64
    }

    pub fn predict(&self, x: &DVector<f64>, v: usize) -> Option<UnitVector3> {
        self.response.decode(&self.mean_prediction(x, v))
    }
}

/// Per-voxel design rows (`n_v × D`) and responses (`n_v × p`) of the
/// observed subjects.
#[derive(Debug, Clone)]
pub struct VoxelData {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

fn voxel_data(data: &ModelData, response: Response) -> Vec<VoxelData> {
    let d = data.n_columns();
    let p = response.dim();
    (0..data.n_voxels())
        .map(|v| {
            let obs: Vec<usize> = (0..data.n_subjects()).filter(|&i| data.direction(i, v).is_some()).collect();
            let x = DMatrix::from_fn(obs.len(), d, |r, c| data.x_row(obs[r])[c]);
            let mut y = DMatrix::zeros(obs.len(), p);
            for (r, &i) in obs.iter().enumerate() {
                y.row_mut(r).copy_from(&response.encode(data.direction(i, v).unwrap()).transpose());
            }
            VoxelData { x, y }
        })
        .collect()
}

/// Mean and precision of `vec(U_v)` (columns stacked) given the error
/// precision `omega`: `Λ = Ω ⊗ XᵀX + I/1000`, `Λ·mean = vec(XᵀY Ω)`.
pub fn coefficient_conditional(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = x.ncols();
    let p = y.ncols();
    let gram = x.transpose() * x;
    let mut lambda = DMatrix::zeros(d * p, d * p);
    for a in 0..p {
        for b in 0..p {
            let block = &gram * omega[(a, b)];
            lambda.view_mut((a * d, b * d), (d, d)).copy_from(&block);
        }
    }
    for k in 0..d * p {
        lambda[(k, k)] += 1.0 / COEF_PRIOR_VAR;
    }
    let rhs_mat = x.transpose() * y * omega;
    let rhs = DVector::from_column_slice(rhs_mat.as_slice());
    let mean = lambda.clone().cholesky().expect("positive definite").solve(&rhs);
    (mean, lambda)
}

fn draw_gaussian<R: Rng>(
    rng: &mut R,
    mean: &DVector<f64>,
    precision: DMatrix<f64>,
) -> Result<DVector<f64>, GaussianError> {
    let chol = precision.cholesky().ok_or(GaussianError::Numerical("coefficient precision"))?;
    let z = DVector::from_fn(mean.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let noise = chol.l().transpose().solve_upper_triangular(&z).ok_or(GaussianError::Numerical("triangular solve"))?;
    Ok(mean + noise)
}

/// Wishart draw by the Bartlett decomposition: `W = L A Aᵀ Lᵀ` with `L` the
/// Cholesky factor of `scale`.
pub fn sample_wishart<R: Rng>(rng: &mut R, df: f64, scale: &DMatrix<f64>) -> DMatrix<f64> {
    let p = scale.nrows();
    let l = scale.clone().cholesky().expect("scale must be positive definite").l();
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).expect("df > p − 1");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = l * a;
    &la * la.transpose()
}

/// Gibbs sampler for `Y_iv ~ N(U_vᵀ X_i, Σ)` with `vec U_v ~ N(0, 1000 I)` and
/// `Σ⁻¹ ~ Wishart(5, I)`.
pub fn fit_gaussian(
    data: &ModelData,
    response: Response,
    cfg: &GibbsConfig,
    seed: u64,
) -> Result<GaussianDraws, GaussianError> {
    let states = fit_responses(&voxel_data(data, response), data.n_columns(), response.dim(), cfg, seed)?;
    Ok(GaussianDraws { response, states })
}

/// The same sampler on arbitrary real responses.
pub fn fit_responses(
    voxels: &[VoxelData],
    d: usize,
    p: usize,
    cfg: &GibbsConfig,
    seed: u64,
) -> Result<Vec<GaussianState>, GaussianError> {
    for (v, vd) in voxels.iter().enumerate() {
        if vd.x.nrows() > 0 && vd.x.nrows() >= d && vd.x.clone().svd(false, false).rank(1e-10) < d {
            return Err(GaussianError::RankDeficient { voxel: v });
        }
    }
    let n_obs: usize = voxels.iter().map(|vd| vd.x.nrows()).sum();
    let mut rng: ChainRng = derived_rng(seed, &[0x6761_7573]);
    let mut omega = DMatrix::<f64>::identity(p, p);
    let mut coef = vec![DMatrix::<f64>::zeros(d, p); voxels.len()];
    let mut states = Vec::new();
    for t in 1..=cfg.total {
        for (v, vd) in voxels.iter().enumerate() {
            let (mean, lambda) = coefficient_conditional(&vd.x, &vd.y, &omega);
            let draw = draw_gaussian(&mut rng, &mean, lambda)?;
            coef[v] = DMatrix::from_column_slice(d, p, draw.as_slice());
        }
        let mut scatter = DMatrix::<f64>::identity(p, p);
        for (vd, u) in voxels.iter().zip(&coef) {
            let r = &vd.y - &vd.x * u;
            scatter += r.transpose() * &r;
        }
        let scale = scatter.try_inverse().ok_or(GaussianError::Numerical("Wishart scale"))?;
        let scale = (&scale + scale.transpose()) * 0.5;
        omega = sample_wishart(&mut rng, WISHART_DF + n_obs as f64, &scale);
        if cfg.keep(t) {
            let sigma = omega.clone().try_inverse().ok_or(GaussianError::Numerical("covariance"))?;
            states.push(GaussianState { coef: coef.clone(), sigma });
        }
    }
    Ok(states)
}
