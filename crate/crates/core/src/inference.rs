//! Posterior summaries: angular expectation, predictive mode directions and
//! tangent-normal covariate effects.

use nalgebra::{DVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ar::{self, ArSpec};
use crate::geometry::{tangent_normal, UnitVector3};
use crate::link::{inverse_link, LinkedCoords};
use crate::model::{CovariateTable, Design, ModelError, ModelState, StreamlineAtlas};
use crate::rng::derived_rng;

/// Mean resultant length below which the angular expectation is undefined.
pub const RESULTANT_TOL: f64 = 1e-9;
pub const DEFAULT_THRESHOLD: f64 = 0.65;
pub const DEFAULT_QUANTILE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InferenceError {
    #[error("no samples")]
    Empty,
    #[error("mean resultant length {0:e} is numerically zero")]
    DegenerateResultant(f64),
    #[error("every draw has a degenerate tangent-normal decomposition at voxel {0}")]
    AllDrawsDegenerate(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid contrast: {0}")]
    InvalidContrast(String),
    #[error("{0}")]
    Model(String),
}

impl From<ModelError> for InferenceError {
    fn from(e: ModelError) -> Self {
        Self::Model(e.to_string())
    }
}

/// Normalized arithmetic mean of unit vectors.
pub fn angular_expectation(samples: &[UnitVector3]) -> Result<UnitVector3, InferenceError> {
    if samples.is_empty() {
        return Err(InferenceError::Empty);
    }
    let sum: Vector3<f64> = samples.iter().map(|s| *s.as_vector()).sum();
    let mean = sum / samples.len() as f64;
    let r = mean.norm();
    if r.is_nan() || r <= RESULTANT_TOL {
        return Err(InferenceError::DegenerateResultant(r));
    }
    Ok(UnitVector3::from_vector(mean).expect("nonzero resultant"))
}

fn check_row(state: &ModelState, x: &DVector<f64>, v: usize) -> Result<(), InferenceError> {
    let (nv, d) = state.alpha.shape();
    if x.len() != d {
        return Err(InferenceError::DimensionMismatch(format!(
            "covariate row has {} entries, design has {d} columns",
            x.len()
        )));
    }
    if v >= nv {
        return Err(InferenceError::DimensionMismatch(format!("voxel {v} out of range (V = {nv})")));
    }
    Ok(())
}

/// Direct mode of a new subject at voxel `v` under one state, random effects
/// at zero.
pub fn predictive_mode(state: &ModelState, x_new: &DVector<f64>, v: usize) -> UnitVector3 {
    let theta = state.alpha.row(v).transpose().dot(x_new);
    let phi = state.beta.row(v).transpose().dot(x_new);
    inverse_link(&LinkedCoords::new(theta, phi)).rotate(&state.rotation())
}

/// `Q⁽ᵗ⁾ ℓ⁻¹(x·α_v⁽ᵗ⁾, x·β_v⁽ᵗ⁾)` for every stored draw.
pub fn predictive_mode_draws(
    states: &[ModelState],
    x_new: &DVector<f64>,
    v: usize,
) -> Result<Vec<UnitVector3>, InferenceError> {
    states
        .iter()
        .map(|s| {
            check_row(s, x_new, v)?;
            Ok(predictive_mode(s, x_new, v))
        })
        .collect()
}

/// Direct-mode draws for a new subject with the spatial random effects
/// integrated out: for each stored state one `(ε, ξ)` path per streamline is
/// drawn from that state's AR processes, giving
/// `Q⁽ᵗ⁾ ℓ⁻¹(x·α_v⁽ᵗ⁾ + ε_v, x·β_v⁽ᵗ⁾ + ξ_v)`. Returns one vector per voxel.
pub fn marginal_mode_draws(
    states: &[ModelState],
    atlas: &StreamlineAtlas,
    x_new: &DVector<f64>,
    seed: u64,
) -> Result<Vec<Vec<UnitVector3>>, InferenceError> {
    let nv = atlas.n_voxels();
    let mut out = vec![Vec::with_capacity(states.len()); nv];
    for (t, s) in states.iter().enumerate() {
        check_row(s, x_new, 0)?;
        let mut rng = derived_rng(seed, &[t as u64]);
        let eps = ArSpec::from_pacf(s.pacf_eps.clone(), s.tau2_eps).map_err(ModelError::from)?;
        let xi = ArSpec::from_pacf(s.pacf_xi.clone(), s.tau2_xi).map_err(ModelError::from)?;
        let q = s.rotation();
        for fiber in atlas.fibers() {
            let e = ar::sample_with(&eps, fiber.len(), &mut rng).map_err(ModelError::from)?;
            let x = ar::sample_with(&xi, fiber.len(), &mut rng).map_err(ModelError::from)?;
            for (j, &v) in fiber.iter().enumerate() {
                let theta = s.alpha.row(v).transpose().dot(x_new) + e[j];
                let phi = s.beta.row(v).transpose().dot(x_new) + x[j];
                out[v].push(inverse_link(&LinkedCoords::new(theta, phi)).rotate(&q));
            }
        }
    }
    Ok(out)
}

/// Tangent-normal summary of one voxel for one contrast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelEffect {
    /// Angular expectation of the deviation directions over non-degenerate draws.
    pub r_mean: Option<UnitVector3>,
    pub m_mean: f64,
    pub m_sd: f64,
    pub prob_large: f64,
    /// `(m_mean − threshold) / m_sd`; `None` when `m_sd` is zero.
    pub z_score: Option<f64>,
    pub n_draws: usize,
    pub n_degenerate: usize,
}

/// Per-draw tangent-normal decomposition of the specific-condition mode about
/// the typical one. Degenerate draws carry `m = 0` and no direction.
pub fn effect_draws(
    states: &[ModelState],
    x_typical: &DVector<f64>,
    x_specific: &DVector<f64>,
    v: usize,
) -> Result<Vec<(f64, Option<UnitVector3>)>, InferenceError> {
    let base = predictive_mode_draws(states, x_typical, v)?;
    let target = predictive_mode_draws(states, x_specific, v)?;
    Ok(base
        .iter()
        .zip(&target)
        .map(|(b, t)| {
            let tn = tangent_normal(b, t);
            match tn.r {
                Some(r) => (tn.m, Some(r)),
                None => (0.0, None),
            }
        })
        .collect())
}

pub fn covariate_effect(
    states: &[ModelState],
    x_typical: &DVector<f64>,
    x_specific: &DVector<f64>,
    v: usize,
    threshold: f64,
) -> Result<VoxelEffect, InferenceError> {
    if states.is_empty() {
        return Err(InferenceError::Empty);
    }
    let draws = effect_draws(states, x_typical, x_specific, v)?;
    let n = draws.len();
    let directions: Vec<UnitVector3> = draws.iter().filter_map(|d| d.1).collect();
    if directions.is_empty() {
        return Err(InferenceError::AllDrawsDegenerate(v));
    }
    let m: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let m_mean = m.iter().sum::<f64>() / n as f64;
    let m_sd = if n > 1 { (m.iter().map(|x| (x - m_mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    let r_mean = match angular_expectation(&directions) {
        Ok(r) => Some(r),
        Err(InferenceError::DegenerateResultant(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(VoxelEffect {
        r_mean,
        m_mean,
        m_sd,
        prob_large: m.iter().filter(|&&x| x > threshold).count() as f64 / n as f64,
        z_score: (m_sd > 0.0).then(|| (m_mean - threshold) / m_sd),
        n_draws: n,
        n_degenerate: n - directions.len(),
    })
}

/// A pair of design rows to compare.
#[derive(Debug, Clone, PartialEq)]
pub struct Contrast {
    pub label: String,
    pub typical: DVector<f64>,
    pub specific: DVector<f64>,
}

/// How to build a contrast from the covariate table.
///
/// Covariates not named by the rule are set to their mean over the subjects
/// of `group` (all subjects when no group is given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContrastSpec {
    /// A unit increase of one covariate.
    Increment { covariate: String, group: Option<String> },
    /// A change of one covariate between two values, e.g. a binary 0 → 1.
    Switch { covariate: String, from: f64, to: f64, group: Option<String> },
    /// Fully specified covariate rows (without intercept).
    Rows { typical: Vec<f64>, specific: Vec<f64>, group: Option<String> },
}

impl ContrastSpec {
    pub fn group(&self) -> Option<&str> {
        match self {
            Self::Increment { group, .. } | Self::Switch { group, .. } | Self::Rows { group, .. } => group.as_deref(),
        }
    }

    pub fn label(&self) -> String {
        let base = match self {
            Self::Increment { covariate, .. } => format!("{covariate}+1"),
            Self::Switch { covariate, from, to, .. } => format!("{covariate}:{from}->{to}"),
            Self::Rows { .. } => "rows".to_string(),
        };
        match self.group() {
            Some(g) => format!("{base}@{g}"),
            None => base,
        }
    }
}

/// Covariate means over the subjects of `group`, or all subjects.
pub fn covariate_means(table: &CovariateTable, group: Option<&str>) -> Result<Vec<f64>, InferenceError> {
    let idx: Vec<usize> = (0..table.n_subjects()).filter(|&i| group.is_none() || table.group(i) == group).collect();
    if idx.is_empty() {
        return Err(InferenceError::InvalidContrast(format!("no subjects in group {group:?}")));
    }
    Ok((0..table.n_covariates())
        .map(|c| idx.iter().map(|&i| table.values[i][c]).sum::<f64>() / idx.len() as f64)
        .collect())
}

pub fn build_contrast(
    spec: &ContrastSpec,
    table: &CovariateTable,
    design: &Design,
) -> Result<Contrast, InferenceError> {
    let group = spec.group();
    if design.group_specific && group.is_none() {
        return Err(InferenceError::InvalidContrast("group-specific design needs a group".into()));
    }
    let column = |name: &str| {
        table.column_index(name).ok_or_else(|| InferenceError::InvalidContrast(format!("unknown covariate {name:?}")))
    };
    let (typical, specific) = match spec {
        ContrastSpec::Increment { covariate, .. } => {
            let c = column(covariate)?;
            let typical = covariate_means(table, group)?;
            let mut specific = typical.clone();
            specific[c] += 1.0;
            (typical, specific)
        }
        ContrastSpec::Switch { covariate, from, to, .. } => {
            let c = column(covariate)?;
            let mut typical = covariate_means(table, group)?;
            let mut specific = typical.clone();
            typical[c] = *from;
            specific[c] = *to;
            (typical, specific)
        }
        ContrastSpec::Rows { typical, specific, .. } => (typical.clone(), specific.clone()),
    };
    Ok(Contrast { label: spec.label(), typical: design.row(&typical, group)?, specific: design.row(&specific, group)? })
}

/// One row of an effect map, flat for tabular export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectRow {
    pub contrast: String,
    pub voxel: usize,
    pub fiber: usize,
    pub m_mean: f64,
    pub prob_large: f64,
    pub z_score: Option<f64>,
    pub flagged: bool,
    pub r_x: Option<f64>,
    pub r_y: Option<f64>,
    pub r_z: Option<f64>,
    pub m_sd: f64,
    pub n_degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMap {
    pub threshold: f64,
    pub quantile: f64,
    /// Empirical quantile of the defined z-scores; `None` when there are none.
    pub z_cutoff: Option<f64>,
    pub rows: Vec<EffectRow>,
}

impl EffectMap {
    pub fn flagged(&self) -> impl Iterator<Item = &EffectRow> {
        self.rows.iter().filter(|r| r.flagged)
    }
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Effects of every contrast at every voxel. Voxels whose z-score reaches the
/// `q`-quantile of all defined z-scores (pooled over contrasts) are flagged;
/// voxels with every draw degenerate are reported with `m_mean = 0` and are
/// never flagged.
pub fn effect_map(
    states: &[ModelState],
    atlas: &StreamlineAtlas,
    contrasts: &[Contrast],
    threshold: f64,
    q: f64,
) -> Result<EffectMap, InferenceError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(InferenceError::InvalidContrast(format!("quantile {q} outside [0, 1]")));
    }
    let nv = atlas.n_voxels();
    let mut rows = Vec::with_capacity(nv * contrasts.len());
    for contrast in contrasts {
        let effects: Vec<Result<EffectRow, InferenceError>> = (0..nv)
            .into_par_iter()
            .map(|v| {
                let fiber = atlas.locate(v).0;
                let row = match covariate_effect(states, &contrast.typical, &contrast.specific, v, threshold) {
                    Ok(e) => EffectRow {
                        contrast: contrast.label.clone(),
                        voxel: v,
                        fiber,
                        m_mean: e.m_mean,
                        prob_large: e.prob_large,
                        z_score: e.z_score,
                        flagged: false,
                        r_x: e.r_mean.map(|r| r.as_vector().x),
                        r_y: e.r_mean.map(|r| r.as_vector().y),
                        r_z: e.r_mean.map(|r| r.as_vector().z),
                        m_sd: e.m_sd,
                        n_degenerate: e.n_degenerate,
                    },
                    Err(InferenceError::AllDrawsDegenerate(_)) => EffectRow {
                        contrast: contrast.label.clone(),
                        voxel: v,
                        fiber,
                        m_mean: 0.0,
                        prob_large: 0.0,
                        z_score: None,
                        flagged: false,
                        r_x: None,
                        r_y: None,
                        r_z: None,
                        m_sd: 0.0,
                        n_degenerate: states.len(),
                    },
                    Err(e) => return Err(e),
                };
                Ok(row)
            })
            .collect();
        for r in effects {
            rows.push(r?);
        }
    }
    let z: Vec<f64> = rows.iter().filter_map(|r| r.z_score).collect();
    let z_cutoff = quantile(&z, q);
    if let Some(cut) = z_cutoff {
        for r in &mut rows {
            r.flagged = r.z_score.is_some_and(|z| z >= cut);
        }
    }
    Ok(EffectMap { threshold, quantile: q, z_cutoff, rows })
}
