//! Data containers, sampler state and the joint log-posterior.
//!
//! Subject `i` and voxel `v` carry a latent link-space pair
//! `η_iv = (θ̃_iv, φ̃_iv)`. The observed direction follows
//! `E_iv ~ vMF(Q·ℓ⁻¹(η_iv), κ)`, and the residuals `η_iv − (X_iα_v, X_iβ_v)`
//! are AR(P) along each streamline. Coefficient columns `α_·(c)`, `β_·(c)`
//! carry AR(P) priors along the same streamlines.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::ar::{ArCorrelation, ArError, PacfVector};
use crate::geometry::{cayley_jacobian, cayley_to_rotation, CayleyParams, Rotation3, UnitVector3};
use crate::link::{inverse_link, inverse_link_with_jacobian, link, LinkedCoords};
use crate::vmf::log_normalizer_3;

/// Shape and rate of the inverse-gamma prior on every variance parameter.
pub const IG_SHAPE: f64 = 0.1;
pub const IG_RATE: f64 = 0.1;
/// Prior variance of each Cayley parameter.
pub const CAYLEY_PRIOR_VAR: f64 = 100.0;
/// Relative tolerance on the norm of an observed direction.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("subject {subject}: unknown group label {label:?}")]
    UnknownGroupLabel { subject: String, label: String },
    #[error("invalid data: {0}")]
    InvalidData(ValidationReport),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite log-posterior term: {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Ar(#[from] ArError),
}

/// One problem found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateVoxel { voxel: usize, first_fiber: usize, second_fiber: usize },
    VoxelOutOfRange { voxel: usize, fiber: usize, n_voxels: usize },
    UncoveredVoxel { voxel: usize },
    ShortFiber { fiber: usize, len: usize },
    NonUnitDirection { subject: usize, voxel: usize, norm: f64 },
    NonFiniteCovariate { subject: usize, column: usize },
    RankDeficientDesign { rank: usize, columns: usize },
    Dimension { detail: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in self.violations.iter().take(5) {
            write!(f, "; {v:?}")?;
        }
        Ok(())
    }
}

/// Disjoint ordered voxel chains covering voxel ids `0..V`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamlineAtlas {
    fibers: Vec<Vec<usize>>,
    #[serde(skip)]
    position: Vec<(usize, usize)>,
}

impl StreamlineAtlas {
    pub fn new(fibers: Vec<Vec<usize>>) -> Result<Self, ModelError> {
        let violations = atlas_violations(&fibers);
        if !violations.is_empty() {
            return Err(ModelError::InvalidData(ValidationReport { violations }));
        }
        Ok(Self::index(fibers))
    }

    /// `k` consecutive index chains with the given lengths.
    pub fn chains(lengths: &[usize]) -> Result<Self, ModelError> {
        let mut next = 0;
        let fibers = lengths
            .iter()
            .map(|&n| {
                let f: Vec<usize> = (next..next + n).collect();
                next += n;
                f
            })
            .collect();
        Self::new(fibers)
    }

    fn index(fibers: Vec<Vec<usize>>) -> Self {
        let n: usize = fibers.iter().map(Vec::len).sum();
        let mut position = vec![(0, 0); n];
        for (k, f) in fibers.iter().enumerate() {
            for (j, &v) in f.iter().enumerate() {
                position[v] = (k, j);
            }
        }
        Self { fibers, position }
    }

    pub fn fibers(&self) -> &[Vec<usize>] {
        &self.fibers
    }

    pub fn fiber(&self, k: usize) -> &[usize] {
        &self.fibers[k]
    }

    pub fn n_fibers(&self) -> usize {
        self.fibers.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.position.len()
    }

    /// Fiber index and position along it.
    pub fn locate(&self, v: usize) -> (usize, usize) {
        self.position[v]
    }

    pub fn distinct_lengths(&self) -> Vec<usize> {
        self.fibers.iter().map(Vec::len).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

impl<'de> Deserialize<'de> for StreamlineAtlas {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            fibers: Vec<Vec<usize>>,
        }
        let raw = Raw::deserialize(d)?;
        StreamlineAtlas::new(raw.fibers).map_err(serde::de::Error::custom)
    }
}

pub fn atlas_violations(fibers: &[Vec<usize>]) -> Vec<Violation> {
    let n: usize = fibers.iter().map(Vec::len).sum();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut out = Vec::new();
    for (k, f) in fibers.iter().enumerate() {
        if f.len() < 2 {
            out.push(Violation::ShortFiber { fiber: k, len: f.len() });
        }
        for &v in f {
            if v >= n {
                out.push(Violation::VoxelOutOfRange { voxel: v, fiber: k, n_voxels: n });
                continue;
            }
            match owner[v] {
                Some(first) => out.push(Violation::DuplicateVoxel { voxel: v, first_fiber: first, second_fiber: k }),
                None => owner[v] = Some(k),
            }
        }
    }
    for (v, o) in owner.iter().enumerate() {
        if o.is_none() {
            out.push(Violation::UncoveredVoxel { voxel: v });
        }
    }
    out
}

/// Subject covariates `X_i1..X_iC` (the intercept is implicit) and optional
/// group labels from a fixed set of levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateTable {
    pub subject_ids: Vec<String>,
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub groups: Option<Vec<String>>,
    pub levels: Vec<String>,
}

impl CovariateTable {
    /// Builds a table; group levels default to the sorted distinct labels.
    pub fn new(
        subject_ids: Vec<String>,
        names: Vec<String>,
        values: Vec<Vec<f64>>,
        groups: Option<Vec<String>>,
    ) -> Result<Self, ModelError> {
        let levels = groups
            .as_ref()
            .map(|g| g.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect())
            .unwrap_or_default();
        Self::with_levels(subject_ids, names, values, groups, levels)
    }

    pub fn with_levels(
        subject_ids: Vec<String>,
        names: Vec<String>,
        values: Vec<Vec<f64>>,
        groups: Option<Vec<String>>,
        levels: Vec<String>,
    ) -> Result<Self, ModelError> {
        let n = subject_ids.len();
        if values.len() != n {
            return Err(ModelError::DimensionMismatch(format!(
                "{} subject ids but {} covariate rows",
                n,
                values.len()
            )));
        }
        if let Some((i, row)) = values.iter().enumerate().find(|(_, r)| r.len() != names.len()) {
            return Err(ModelError::DimensionMismatch(format!(
                "covariate row {i} has {} values, expected {}",
                row.len(),
                names.len()
            )));
        }
        if let Some(g) = &groups {
            if g.len() != n {
                return Err(ModelError::DimensionMismatch(format!("{} subjects but {} group labels", n, g.len())));
            }
        }
        Ok(Self { subject_ids, names, values, groups, levels })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn group(&self, i: usize) -> Option<&str> {
        self.groups.as_ref().map(|g| g[i].as_str())
    }
}

/// Design matrix with an intercept column, optionally expanded into one block
/// of `C + 1` columns per group level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    #[serde(with = "crate::serde_rows")]
    pub x: DMatrix<f64>,
    pub column_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub levels: Vec<String>,
    pub group_specific: bool,
}

impl Design {
    pub fn n_columns(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn block_width(&self) -> usize {
        self.covariate_names.len() + 1
    }

    /// Builds one design row from raw covariate values and a group label.
    pub fn row(&self, covariates: &[f64], group: Option<&str>) -> Result<DVector<f64>, ModelError> {
        let c = self.covariate_names.len();
        if covariates.len() != c {
            return Err(ModelError::DimensionMismatch(format!(
                "covariate row has {} values, design expects {c}",
                covariates.len()
            )));
        }
        let base = std::iter::once(1.0).chain(covariates.iter().copied());
        if !self.group_specific {
            return Ok(DVector::from_iterator(c + 1, base));
        }
        let label =
            group.ok_or_else(|| ModelError::UnknownGroupLabel { subject: "<new>".into(), label: String::new() })?;
        let g = self
            .levels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ModelError::UnknownGroupLabel { subject: "<new>".into(), label: label.to_string() })?;
        let mut row = DVector::zeros(self.n_columns());
        for (j, val) in base.enumerate() {
            row[g * (c + 1) + j] = val;
        }
        Ok(row)
    }
}

pub fn build_design(table: &CovariateTable, group_specific: bool) -> Result<Design, ModelError> {
    let c = table.n_covariates();
    let n = table.n_subjects();
    let base_names: Vec<String> = std::iter::once("intercept".to_string()).chain(table.names.iter().cloned()).collect();
    if !group_specific {
        let x = DMatrix::from_fn(n, c + 1, |i, j| if j == 0 { 1.0 } else { table.values[i][j - 1] });
        return Ok(Design {
            x,
            column_names: base_names,
            covariate_names: table.names.clone(),
            levels: table.levels.clone(),
            group_specific: false,
        });
    }
    let groups = table.groups.as_ref().ok_or_else(|| {
        ModelError::InvalidConfig("group-specific coefficients requested but the table has no group column".into())
    })?;
    let g = table.levels.len();
    let mut x = DMatrix::zeros(n, g * (c + 1));
    for i in 0..n {
        let level = table.levels.iter().position(|l| *l == groups[i]).ok_or_else(|| ModelError::UnknownGroupLabel {
            subject: table.subject_ids[i].clone(),
            label: groups[i].clone(),
        })?;
        x[(i, level * (c + 1))] = 1.0;
        for j in 0..c {
            x[(i, level * (c + 1) + j + 1)] = table.values[i][j];
        }
    }
    let column_names = table.levels.iter().flat_map(|l| base_names.iter().map(move |b| format!("{b}:{l}"))).collect();
    Ok(Design {
        x,
        column_names,
        covariate_names: table.names.clone(),
        levels: table.levels.clone(),
        group_specific: true,
    })
}

/// Raw observed directions with a missing-data mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionField {
    n_subjects: usize,
    n_voxels: usize,
    values: Vec<Vector3<f64>>,
    observed: Vec<bool>,
}

impl DirectionField {
    pub fn new(n_subjects: usize, n_voxels: usize) -> Self {
        Self {
            n_subjects,
            n_voxels,
            values: vec![Vector3::zeros(); n_subjects * n_voxels],
            observed: vec![false; n_subjects * n_voxels],
        }
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_voxels(&self) -> usize {
        self.n_voxels
    }

    pub fn set(&mut self, i: usize, v: usize, value: [f64; 3]) {
        let k = i * self.n_voxels + v;
        self.values[k] = Vector3::from(value);
        self.observed[k] = true;
    }

    pub fn clear(&mut self, i: usize, v: usize) {
        self.observed[i * self.n_voxels + v] = false;
    }

    pub fn get(&self, i: usize, v: usize) -> Option<&Vector3<f64>> {
        let k = i * self.n_voxels + v;
        self.observed[k].then(|| &self.values[k])
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}

/// Checks atlas disjointness and coverage, direction norms and the design.
pub fn validate(fibers: &[Vec<usize>], table: &CovariateTable, directions: &DirectionField) -> ValidationReport {
    let mut violations = atlas_violations(fibers);
    let n_vox: usize = fibers.iter().map(Vec::len).sum();
    if directions.n_voxels() != n_vox {
        violations.push(Violation::Dimension {
            detail: format!("directions cover {} voxels, atlas has {n_vox}", directions.n_voxels()),
        });
    }
    if directions.n_subjects() != table.n_subjects() {
        violations.push(Violation::Dimension {
            detail: format!(
                "directions cover {} subjects, covariate table has {}",
                directions.n_subjects(),
                table.n_subjects()
            ),
        });
    }
    for i in 0..directions.n_subjects() {
        for v in 0..directions.n_voxels() {
            if let Some(e) = directions.get(i, v) {
                let norm = e.norm();
                if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
                    violations.push(Violation::NonUnitDirection { subject: i, voxel: v, norm });
                }
            }
        }
    }
    for (i, row) in table.values.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            if !x.is_finite() {
                violations.push(Violation::NonFiniteCovariate { subject: i, column: j + 1 });
            }
        }
    }
    let group_specific = table.groups.is_some() && table.levels.len() > 1;
    if let Ok(design) = build_design(table, group_specific) {
        if design.x.iter().all(|x| x.is_finite()) {
            let rank = design.x.clone().svd(false, false).rank(1e-9);
            if rank < design.n_columns() {
                violations.push(Violation::RankDeficientDesign { rank, columns: design.n_columns() });
            }
        }
    }
    ValidationReport { violations }
}

/// Validated inputs to a fit.
#[derive(Debug, Clone)]
pub struct ModelData {
    pub atlas: StreamlineAtlas,
    pub table: CovariateTable,
    pub design: Design,
    directions: Vec<Option<UnitVector3>>,
    rows: Vec<DVector<f64>>,
    n_obs: usize,
}

impl ModelData {
    /// Validates and assembles the data. Rank deficiency of the design is
    /// tolerated since every coefficient has a proper prior.
    pub fn new(
        atlas: StreamlineAtlas,
        table: CovariateTable,
        field: &DirectionField,
        group_specific: bool,
    ) -> Result<Self, ModelError> {
        let report = validate(atlas.fibers(), &table, field);
        let blocking: Vec<Violation> =
            report.violations.into_iter().filter(|v| !matches!(v, Violation::RankDeficientDesign { .. })).collect();
        if !blocking.is_empty() {
            return Err(ModelError::InvalidData(ValidationReport { violations: blocking }));
        }
        let design = build_design(&table, group_specific)?;
        let n = table.n_subjects();
        let v_count = atlas.n_voxels();
        let mut directions = Vec::with_capacity(n * v_count);
        for i in 0..n {
            for v in 0..v_count {
                directions.push(field.get(i, v).map(|e| UnitVector3::from_vector(*e).expect("validated direction")));
            }
        }
        let n_obs = directions.iter().filter(|d| d.is_some()).count();
        let rows = (0..n).map(|i| design.x.row(i).transpose()).collect();
        Ok(Self { atlas, table, design, directions, rows, n_obs })
    }

    pub fn n_subjects(&self) -> usize {
        self.table.n_subjects()
    }

    pub fn n_voxels(&self) -> usize {
        self.atlas.n_voxels()
    }

    pub fn n_columns(&self) -> usize {
        self.design.n_columns()
    }

    pub fn n_observed(&self) -> usize {
        self.n_obs
    }

    pub fn direction(&self, i: usize, v: usize) -> Option<&UnitVector3> {
        self.directions[i * self.n_voxels() + v].as_ref()
    }

    pub fn x_row(&self, i: usize) -> &DVector<f64> {
        &self.rows[i]
    }

    /// Same data with every direction masked out.
    pub fn without_directions(&self) -> Self {
        let mut out = self.clone();
        out.directions.iter_mut().for_each(|d| *d = None);
        out.n_obs = 0;
        out
    }
}

/// Initial random-walk scales; all adapt during burn-in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepSizes {
    pub eta: f64,
    pub pacf: f64,
    pub log_kappa: f64,
    pub cayley: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self { eta: 0.1, pacf: 0.1, log_kappa: 0.1, cayley: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Shared AR lag order P.
    pub lag: usize,
    pub total: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub threshold: f64,
    pub quantile: f64,
    pub link_eps: f64,
    pub group_specific: bool,
    pub steps: StepSizes,
    pub adapt: bool,
    pub target_acceptance: f64,
    pub kappa_init: f64,
    pub kappa_max: f64,
    /// Keep `η` in stored draws.
    pub store_latent: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lag: 5,
            total: 5000,
            burn_in: 2000,
            thin: 1,
            seed: 1,
            threshold: 0.65,
            quantile: 0.9,
            link_eps: crate::link::LINK_EPS,
            group_specific: false,
            steps: StepSizes::default(),
            adapt: true,
            target_acceptance: 0.3,
            kappa_init: 10.0,
            kappa_max: 1e6,
            store_latent: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field: &str, why: &str| Err(ModelError::InvalidConfig(format!("{field}: {why}")));
        if self.lag < 1 {
            return bad("lag", "must be at least 1");
        }
        if self.total <= self.burn_in {
            return bad("total", "must exceed burn_in");
        }
        if self.thin < 1 {
            return bad("thin", "must be at least 1");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold", "must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.quantile) {
            return bad("quantile", "must lie in [0, 1]");
        }
        if !(self.link_eps > 0.0 && self.link_eps < 0.5) {
            return bad("link_eps", "must lie in (0, 0.5)");
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target_acceptance", "must lie in (0, 1)");
        }
        if !(self.kappa_init > 0.0 && self.kappa_init <= self.kappa_max) {
            return bad("kappa_init", "must lie in (0, kappa_max]");
        }
        let s = &self.steps;
        if ![s.eta, s.pacf, s.log_kappa, s.cayley].iter().all(|x| x.is_finite() && *x > 0.0) {
            return bad("steps", "all step sizes must be positive");
        }
        Ok(())
    }

    /// Number of stored draws, `⌊(total − burn_in) / thin⌋`.
    pub fn n_draws(&self) -> usize {
        (self.total - self.burn_in) / self.thin
    }
}

/// One of the two link-space channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Theta,
    Phi,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::Theta, Channel::Phi];

    pub fn index(self) -> usize {
        match self {
            Channel::Theta => 0,
            Channel::Phi => 1,
        }
    }
}

/// Full parameter state of the spatial model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    /// `V × D` coefficients of the θ̃ equation.
    #[serde(with = "crate::serde_rows")]
    pub alpha: DMatrix<f64>,
    /// `V × D` coefficients of the φ̃ equation.
    #[serde(with = "crate::serde_rows")]
    pub beta: DMatrix<f64>,
    /// `N × V` latent θ̃.
    #[serde(with = "crate::serde_rows")]
    pub eta_theta: DMatrix<f64>,
    /// `N × V` latent φ̃.
    #[serde(with = "crate::serde_rows")]
    pub eta_phi: DMatrix<f64>,
    pub cayley: CayleyParams,
    pub kappa: f64,
    pub tau2_eps: f64,
    pub tau2_xi: f64,
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
    pub pacf_eps: PacfVector,
    pub pacf_xi: PacfVector,
    pub pacf_alpha: PacfVector,
    pub pacf_beta: PacfVector,
}

impl ModelState {
    pub fn zeros(n_subjects: usize, n_voxels: usize, n_columns: usize, lag: usize) -> Self {
        Self {
            alpha: DMatrix::zeros(n_voxels, n_columns),
            beta: DMatrix::zeros(n_voxels, n_columns),
            eta_theta: DMatrix::zeros(n_subjects, n_voxels),
            eta_phi: DMatrix::zeros(n_subjects, n_voxels),
            cayley: CayleyParams::default(),
            kappa: 1.0,
            tau2_eps: 1.0,
            tau2_xi: 1.0,
            sigma2_alpha: 1.0,
            sigma2_beta: 1.0,
            pacf_eps: PacfVector::zeros(lag),
            pacf_xi: PacfVector::zeros(lag),
            pacf_alpha: PacfVector::zeros(lag),
            pacf_beta: PacfVector::zeros(lag),
        }
    }

    /// Data-driven starting point: `η` at the linked observations, coefficients
    /// by ridge regression, variances from the implied residuals, zero pacfs,
    /// identity rotation.
    pub fn initialize(data: &ModelData, config: &ModelConfig) -> Self {
        let (n, nv, d) = (data.n_subjects(), data.n_voxels(), data.n_columns());
        let mut s = Self::zeros(n, nv, d, config.lag);
        s.kappa = config.kappa_init;
        for v in 0..nv {
            let observed: Vec<(usize, LinkedCoords)> = (0..n)
                .filter_map(|i| data.direction(i, v).map(|e| (i, crate::link::link_with_eps(e, config.link_eps))))
                .collect();
            let fill = if observed.is_empty() {
                LinkedCoords::default()
            } else {
                let m = observed.len() as f64;
                LinkedCoords::new(
                    observed.iter().map(|(_, c)| c.theta_tilde.clamp(-8.0, 8.0)).sum::<f64>() / m,
                    observed.iter().map(|(_, c)| c.phi_tilde.clamp(-8.0, 8.0)).sum::<f64>() / m,
                )
            };
            for i in 0..n {
                s.eta_theta[(i, v)] = fill.theta_tilde;
                s.eta_phi[(i, v)] = fill.phi_tilde;
            }
            for (i, c) in observed {
                s.eta_theta[(i, v)] = c.theta_tilde.clamp(-8.0, 8.0);
                s.eta_phi[(i, v)] = c.phi_tilde.clamp(-8.0, 8.0);
            }
        }
        let x = &data.design.x;
        let gram = x.transpose() * x + DMatrix::identity(d, d) * 1e-2;
        if let Some(chol) = gram.cholesky() {
            s.alpha = chol.solve(&(x.transpose() * &s.eta_theta)).transpose();
            s.beta = chol.solve(&(x.transpose() * &s.eta_phi)).transpose();
        }
        let mean_sq = |m: &DMatrix<f64>| m.norm_squared() / (m.len().max(1) as f64);
        s.tau2_eps = mean_sq(&(&s.eta_theta - x * s.alpha.transpose())).max(1e-3);
        s.tau2_xi = mean_sq(&(&s.eta_phi - x * s.beta.transpose())).max(1e-3);
        s.sigma2_alpha = mean_sq(&s.alpha).max(1e-2);
        s.sigma2_beta = mean_sq(&s.beta).max(1e-2);
        s
    }

    pub fn lag(&self) -> usize {
        self.pacf_eps.order()
    }

    pub fn rotation(&self) -> Rotation3 {
        cayley_to_rotation(&self.cayley)
    }

    pub fn eta(&self, ch: Channel) -> &DMatrix<f64> {
        match ch {
            Channel::Theta => &self.eta_theta,
            Channel::Phi => &self.eta_phi,
        }
    }

    pub fn eta_mut(&mut self, ch: Channel) -> &mut DMatrix<f64> {
        match ch {
            Channel::Theta => &mut self.eta_theta,
            Channel::Phi => &mut self.eta_phi,
        }
    }

    pub fn coef(&self, ch: Channel) -> &DMatrix<f64> {
        match ch {
            Channel::Theta => &self.alpha,
            Channel::Phi => &self.beta,
        }
    }

    pub fn coef_mut(&mut self, ch: Channel) -> &mut DMatrix<f64> {
        match ch {
            Channel::Theta => &mut self.alpha,
            Channel::Phi => &mut self.beta,
        }
    }

    /// Innovation variance of the random effect in this channel.
    pub fn tau2(&self, ch: Channel) -> f64 {
        match ch {
            Channel::Theta => self.tau2_eps,
            Channel::Phi => self.tau2_xi,
        }
    }

    pub fn tau2_mut(&mut self, ch: Channel) -> &mut f64 {
        match ch {
            Channel::Theta => &mut self.tau2_eps,
            Channel::Phi => &mut self.tau2_xi,
        }
    }

    pub fn sigma2(&self, ch: Channel) -> f64 {
        match ch {
            Channel::Theta => self.sigma2_alpha,
            Channel::Phi => self.sigma2_beta,
        }
    }

    pub fn sigma2_mut(&mut self, ch: Channel) -> &mut f64 {
        match ch {
            Channel::Theta => &mut self.sigma2_alpha,
            Channel::Phi => &mut self.sigma2_beta,
        }
    }

    pub fn pacf_resid(&self, ch: Channel) -> &PacfVector {
        match ch {
            Channel::Theta => &self.pacf_eps,
            Channel::Phi => &self.pacf_xi,
        }
    }

    pub fn pacf_resid_mut(&mut self, ch: Channel) -> &mut PacfVector {
        match ch {
            Channel::Theta => &mut self.pacf_eps,
            Channel::Phi => &mut self.pacf_xi,
        }
    }

    pub fn pacf_coef(&self, ch: Channel) -> &PacfVector {
        match ch {
            Channel::Theta => &self.pacf_alpha,
            Channel::Phi => &self.pacf_beta,
        }
    }

    pub fn pacf_coef_mut(&mut self, ch: Channel) -> &mut PacfVector {
        match ch {
            Channel::Theta => &mut self.pacf_alpha,
            Channel::Phi => &mut self.pacf_beta,
        }
    }

    pub fn linked(&self, i: usize, v: usize) -> LinkedCoords {
        LinkedCoords::new(self.eta_theta[(i, v)], self.eta_phi[(i, v)])
    }

    /// Rotated mode `μ_iv = ℓ⁻¹(η_iv)`.
    pub fn mu(&self, i: usize, v: usize) -> UnitVector3 {
        inverse_link(&self.linked(i, v))
    }

    /// Direct mode `M_iv = Q μ_iv`.
    pub fn mode(&self, i: usize, v: usize) -> UnitVector3 {
        self.mu(i, v).rotate(&self.rotation())
    }

    /// `X_i · coef_v`.
    pub fn fitted(&self, ch: Channel, x: &DVector<f64>, v: usize) -> f64 {
        let c = self.coef(ch);
        (0..c.ncols()).map(|j| c[(v, j)] * x[j]).sum()
    }

    pub fn residual(&self, ch: Channel, data: &ModelData, i: usize, fiber: &[usize]) -> Vec<f64> {
        let x = data.x_row(i);
        let eta = self.eta(ch);
        fiber.iter().map(|&v| eta[(i, v)] - self.fitted(ch, x, v)).collect()
    }

    pub fn check_dimensions(&self, data: &ModelData) -> Result<(), ModelError> {
        let (n, nv, d) = (data.n_subjects(), data.n_voxels(), data.n_columns());
        let shapes = [
            ("alpha", self.alpha.shape(), (nv, d)),
            ("beta", self.beta.shape(), (nv, d)),
            ("eta_theta", self.eta_theta.shape(), (n, nv)),
            ("eta_phi", self.eta_phi.shape(), (n, nv)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(ModelError::DimensionMismatch(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        let p = self.lag();
        for (name, pacf) in
            [("pacf_xi", &self.pacf_xi), ("pacf_alpha", &self.pacf_alpha), ("pacf_beta", &self.pacf_beta)]
        {
            if pacf.order() != p {
                return Err(ModelError::DimensionMismatch(format!("{name} has order {}, expected {p}", pacf.order())));
            }
        }
        Ok(())
    }

    /// Positivity, pacf range and finiteness.
    pub fn invariants_hold(&self) -> bool {
        let pos = [self.kappa, self.tau2_eps, self.tau2_xi, self.sigma2_alpha, self.sigma2_beta]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0);
        let pacf = [&self.pacf_eps, &self.pacf_xi, &self.pacf_alpha, &self.pacf_beta]
            .iter()
            .all(|p| p.as_slice().iter().all(|r| r.abs() < 1.0));
        let finite =
            [&self.eta_theta, &self.eta_phi, &self.alpha, &self.beta].iter().all(|m| m.iter().all(|x| x.is_finite()));
        pos && pacf && finite && self.cayley.is_finite()
    }
}

/// A factored unit-innovation AR correlation together with its inverse.
#[derive(Debug, Clone)]
pub struct ArBlock {
    pub corr: ArCorrelation,
    pub precision: DMatrix<f64>,
}

/// Correlation blocks for each distinct streamline length.
#[derive(Debug, Clone)]
pub struct BlockCorrelations {
    blocks: BTreeMap<usize, ArBlock>,
}

impl BlockCorrelations {
    pub fn new(pacf: &PacfVector, lengths: &[usize]) -> Result<Self, ArError> {
        let mut blocks = BTreeMap::new();
        for &n in lengths {
            let corr = ArCorrelation::new(pacf, n)?;
            let precision = corr.precision();
            blocks.insert(n, ArBlock { corr, precision });
        }
        Ok(Self { blocks })
    }

    pub fn get(&self, len: usize) -> &ArBlock {
        &self.blocks[&len]
    }
}

/// The log-posterior split into its addends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogPosterior {
    pub likelihood: f64,
    pub random_effects: f64,
    pub coefficient_prior: f64,
    pub cayley_prior: f64,
    pub variance_prior: f64,
    pub flat_prior: f64,
}

impl LogPosterior {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.random_effects
            + self.coefficient_prior
            + self.cayley_prior
            + self.variance_prior
            + self.flat_prior
    }
}

/// `Σ_obs μ_iv E_ivᵀ`, so that `Σ_obs (Qμ_iv)ᵀE_iv = tr(Q S)`.
pub fn direction_statistic(state: &ModelState, data: &ModelData) -> Matrix3<f64> {
    let mut s = Matrix3::zeros();
    for i in 0..data.n_subjects() {
        for v in 0..data.n_voxels() {
            if let Some(e) = data.direction(i, v) {
                s += state.mu(i, v).as_vector() * e.as_vector().transpose();
            }
        }
    }
    s
}

/// `log p(s)` for `s ~ InvGamma(shape, rate)`.
pub fn inverse_gamma_log_density(s: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * s.ln() - rate / s
}

pub fn cayley_log_prior(p: &CayleyParams) -> f64 {
    p.to_array().iter().map(|a| -0.5 * (2.0 * PI * CAYLEY_PRIOR_VAR).ln() - a * a / (2.0 * CAYLEY_PRIOR_VAR)).sum()
}

fn coef_column(coef: &DMatrix<f64>, fiber: &[usize], c: usize) -> Vec<f64> {
    fiber.iter().map(|&v| coef[(v, c)]).collect()
}

pub fn log_posterior(state: &ModelState, data: &ModelData) -> Result<LogPosterior, ModelError> {
    state.check_dimensions(data)?;
    let lengths = data.atlas.distinct_lengths();

    let s = direction_statistic(state, data);
    let q = state.rotation();
    let likelihood = data.n_observed() as f64 * log_normalizer_3(state.kappa) + state.kappa * (q.matrix() * s).trace();

    let mut random_effects = 0.0;
    let mut coefficient_prior = 0.0;
    for ch in Channel::BOTH {
        let resid = BlockCorrelations::new(state.pacf_resid(ch), &lengths)?;
        let coef = BlockCorrelations::new(state.pacf_coef(ch), &lengths)?;
        for fiber in data.atlas.fibers() {
            let rb = resid.get(fiber.len());
            for i in 0..data.n_subjects() {
                random_effects += rb.corr.log_density(&state.residual(ch, data, i, fiber), state.tau2(ch));
            }
            let cb = coef.get(fiber.len());
            for c in 0..data.n_columns() {
                coefficient_prior += cb.corr.log_density(&coef_column(state.coef(ch), fiber, c), state.sigma2(ch));
            }
        }
    }

    let variance_prior = [state.tau2_eps, state.tau2_xi, state.sigma2_alpha, state.sigma2_beta]
        .iter()
        .map(|&v| inverse_gamma_log_density(v, IG_SHAPE, IG_RATE))
        .sum();
    let flat_prior = -((4 * state.lag()) as f64) * 2f64.ln();

    let lp = LogPosterior {
        likelihood,
        random_effects,
        coefficient_prior,
        cayley_prior: cayley_log_prior(&state.cayley),
        variance_prior,
        flat_prior,
    };
    for (name, value) in [
        ("likelihood", lp.likelihood),
        ("random_effects", lp.random_effects),
        ("coefficient_prior", lp.coefficient_prior),
        ("cayley_prior", lp.cayley_prior),
        ("variance_prior", lp.variance_prior),
    ] {
        if !value.is_finite() {
            return Err(ModelError::NonFinite(name));
        }
    }
    Ok(lp)
}

/// Partial derivatives of the log-posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub eta_theta: DMatrix<f64>,
    pub eta_phi: DMatrix<f64>,
    pub alpha: DMatrix<f64>,
    pub beta: DMatrix<f64>,
    pub cayley: [f64; 3],
}

impl Gradient {
    pub fn eta(&self, ch: Channel) -> &DMatrix<f64> {
        match ch {
            Channel::Theta => &self.eta_theta,
            Channel::Phi => &self.eta_phi,
        }
    }

    pub fn coef(&self, ch: Channel) -> &DMatrix<f64> {
        match ch {
            Channel::Theta => &self.alpha,
            Channel::Phi => &self.beta,
        }
    }
}

/// Gradient with respect to `η`, `α`, `β` and the Cayley parameters.
pub fn log_posterior_gradient(state: &ModelState, data: &ModelData) -> Result<Gradient, ModelError> {
    state.check_dimensions(data)?;
    let (n, nv, d) = (data.n_subjects(), data.n_voxels(), data.n_columns());
    let lengths = data.atlas.distinct_lengths();
    let q = state.rotation();
    let mut g_eta = [DMatrix::zeros(n, nv), DMatrix::zeros(n, nv)];
    let mut g_coef = [DMatrix::zeros(nv, d), DMatrix::zeros(nv, d)];

    for i in 0..n {
        for v in 0..nv {
            if let Some(e) = data.direction(i, v) {
                let y = q.matrix().transpose() * e.as_vector();
                let (_, dt, dp) = inverse_link_with_jacobian(&state.linked(i, v));
                g_eta[0][(i, v)] += state.kappa * dt.dot(&y);
                g_eta[1][(i, v)] += state.kappa * dp.dot(&y);
            }
        }
    }

    for ch in Channel::BOTH {
        let k = ch.index();
        let resid = BlockCorrelations::new(state.pacf_resid(ch), &lengths)?;
        let coef = BlockCorrelations::new(state.pacf_coef(ch), &lengths)?;
        for fiber in data.atlas.fibers() {
            let rb = resid.get(fiber.len());
            for i in 0..n {
                let r = DVector::from_vec(state.residual(ch, data, i, fiber));
                let w = &rb.precision * r / state.tau2(ch);
                let x = data.x_row(i);
                for (j, &v) in fiber.iter().enumerate() {
                    g_eta[k][(i, v)] -= w[j];
                    for c in 0..d {
                        g_coef[k][(v, c)] += w[j] * x[c];
                    }
                }
            }
            let cb = coef.get(fiber.len());
            for c in 0..d {
                let a = DVector::from_vec(coef_column(state.coef(ch), fiber, c));
                let w = &cb.precision * a / state.sigma2(ch);
                for (j, &v) in fiber.iter().enumerate() {
                    g_coef[k][(v, c)] -= w[j];
                }
            }
        }
    }

    let s = direction_statistic(state, data);
    let jac = cayley_jacobian(&state.cayley);
    let a = state.cayley.to_array();
    let cayley = [0, 1, 2].map(|m| state.kappa * (jac[m] * s).trace() - a[m] / CAYLEY_PRIOR_VAR);

    let [eta_theta, eta_phi] = g_eta;
    let [alpha, beta] = g_coef;
    Ok(Gradient { eta_theta, eta_phi, alpha, beta, cayley })
}

/// Link coordinates of every observed direction, rotated back by `Qᵀ`.
pub fn observed_link(data: &ModelData, q: &Rotation3, i: usize, v: usize) -> Option<LinkedCoords> {
    data.direction(i, v).map(|e| link(&e.rotate_inverse(q)))
}
