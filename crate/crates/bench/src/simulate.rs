//! Synthetic streamline data drawn from the spatial vMF regression model.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vmfreg_core::ar::{ArCorrelation, PacfVector};
use vmfreg_core::geometry::CayleyParams;
use vmfreg_core::link::{inverse_link, LinkedCoords};
use vmfreg_core::model::{
    build_design, CovariateTable, DirectionField, ModelData, ModelError, ModelState, StreamlineAtlas,
};
use vmfreg_core::rng::derived_rng;
use vmfreg_core::{UnitVector3, VmfParams};

/// A shift added to one covariate's coefficients along one streamline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub fiber: usize,
    /// Covariate name, e.g. `"x2"`; the shift applies to its design column.
    pub covariate: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_fibers: usize,
    pub voxels_per_fiber: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Covariate count C: C − 1 standard normal columns and one binary column.
    pub n_covariates: usize,
    pub lag: usize,
    pub kappa: f64,
    pub tau2_eps: f64,
    pub tau2_xi: f64,
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
    /// Number of groups; 1 means no group column.
    pub n_groups: usize,
    /// Draw every pacf as zero instead of uniform on (−1, 1).
    pub independent: bool,
    pub planted: Option<PlantedEffect>,
    pub cayley: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_fibers: 3,
            voxels_per_fiber: 20,
            n_train: 10,
            n_test: 10,
            n_covariates: 2,
            lag: 3,
            kappa: 20.0,
            tau2_eps: 1.0,
            tau2_xi: 1.0,
            sigma2_alpha: 1.0,
            sigma2_beta: 1.0,
            n_groups: 1,
            independent: false,
            planted: None,
            cayley: [0.0; 3],
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), String> {
        let counts = [
            ("n_fibers", self.n_fibers),
            ("n_train", self.n_train),
            ("n_covariates", self.n_covariates),
            ("lag", self.lag),
            ("n_groups", self.n_groups),
        ];
        for (name, n) in counts {
            if n < 1 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if self.voxels_per_fiber < 2 {
            return Err("voxels_per_fiber must be at least 2".into());
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(format!("kappa must be finite and non-negative, got {}", self.kappa));
        }
        for (name, v) in [
            ("tau2_eps", self.tau2_eps),
            ("tau2_xi", self.tau2_xi),
            ("sigma2_alpha", self.sigma2_alpha),
            ("sigma2_beta", self.sigma2_beta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        if let Some(p) = &self.planted {
            if p.fiber >= self.n_fibers {
                return Err(format!("planted.fiber {} out of range", p.fiber));
            }
            if !covariate_names(self.n_covariates).contains(&p.covariate) {
                return Err(format!("planted.covariate {:?} is not a generated covariate", p.covariate));
            }
        }
        Ok(())
    }
}

/// `x1..x{C−1}` normal, `x{C}` binary.
pub fn covariate_names(c: usize) -> Vec<String> {
    (1..=c).map(|j| format!("x{j}")).collect()
}

/// Generating parameters, retained for recovery checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    /// Full state over the training subjects.
    pub train: ModelState,
    #[serde(with = "rows")]
    pub test_eta_theta: DMatrix<f64>,
    #[serde(with = "rows")]
    pub test_eta_phi: DMatrix<f64>,
}

impl Truth {
    /// Direct mode of training subject `i` at voxel `v`.
    pub fn train_mode(&self, i: usize, v: usize) -> UnitVector3 {
        self.train.mode(i, v)
    }
}

mod rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

#[derive(Debug, Clone)]
pub struct Split {
    pub table: CovariateTable,
    pub directions: DirectionField,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub atlas: StreamlineAtlas,
    pub train: Split,
    pub test: Split,
    pub truth: Truth,
    pub config: SyntheticConfig,
}

impl SyntheticData {
    pub fn train_data(&self) -> Result<ModelData, ModelError> {
        ModelData::new(self.atlas.clone(), self.train.table.clone(), &self.train.directions, self.config.n_groups > 1)
    }

    pub fn test_data(&self) -> Result<ModelData, ModelError> {
        ModelData::new(self.atlas.clone(), self.test.table.clone(), &self.test.directions, self.config.n_groups > 1)
    }
}

fn draw_pacf<R: Rng>(rng: &mut R, lag: usize, independent: bool) -> PacfVector {
    let v = (0..lag).map(|_| if independent { 0.0 } else { rng.random_range(-0.999..0.999) }).collect();
    PacfVector::new(v).expect("drawn inside (-1, 1)")
}

fn make_table<R: Rng>(rng: &mut R, cfg: &SyntheticConfig, prefix: &str, n: usize) -> CovariateTable {
    let c = cfg.n_covariates;
    let values = (0..n)
        .map(|_| {
            let mut row: Vec<f64> = (0..c - 1).map(|_| rng.sample(StandardNormal)).collect();
            row.push(if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            row
        })
        .collect();
    let (groups, levels) = if cfg.n_groups > 1 {
        let levels: Vec<String> = (1..=cfg.n_groups).map(|g| format!("g{g}")).collect();
        (Some((0..n).map(|i| levels[i % cfg.n_groups].clone()).collect()), levels)
    } else {
        (None, Vec::new())
    };
    CovariateTable::with_levels(
        (0..n).map(|i| format!("{prefix}{i:03}")).collect(),
        covariate_names(c),
        values,
        groups,
        levels,
    )
    .expect("consistent synthetic table")
}

/// Draws `(η_θ, η_φ)` for every subject of a table and the directions.
fn draw_subjects<R: Rng>(
    rng: &mut R,
    atlas: &StreamlineAtlas,
    x: &DMatrix<f64>,
    truth: &ModelState,
    corr: [&[ArCorrelation]; 2],
) -> (DMatrix<f64>, DMatrix<f64>, DirectionField) {
    let n = x.nrows();
    let nv = atlas.n_voxels();
    let fitted_t = x * truth.alpha.transpose();
    let fitted_p = x * truth.beta.transpose();
    let mut eta_t = DMatrix::zeros(n, nv);
    let mut eta_p = DMatrix::zeros(n, nv);
    for i in 0..n {
        for (k, fiber) in atlas.fibers().iter().enumerate() {
            let e = corr[0][k].sample(rng, truth.tau2_eps);
            let x_ = corr[1][k].sample(rng, truth.tau2_xi);
            for (j, &v) in fiber.iter().enumerate() {
                eta_t[(i, v)] = fitted_t[(i, v)] + e[j];
                eta_p[(i, v)] = fitted_p[(i, v)] + x_[j];
            }
        }
    }
    let q = truth.rotation();
    let mut field = DirectionField::new(n, nv);
    for i in 0..n {
        for v in 0..nv {
            let mode = inverse_link(&LinkedCoords::new(eta_t[(i, v)], eta_p[(i, v)])).rotate(&q);
            let e = VmfParams::new(mode, truth.kappa).expect("validated kappa").sample_one(rng);
            field.set(i, v, e.to_array());
        }
    }
    (eta_t, eta_p, field)
}

pub fn simulate(cfg: &SyntheticConfig) -> Result<SyntheticData, String> {
    cfg.validate()?;
    let mut rng = derived_rng(cfg.seed, &[0x0053_494d]);
    let lengths = vec![cfg.voxels_per_fiber; cfg.n_fibers];
    let atlas = StreamlineAtlas::chains(&lengths).map_err(|e| e.to_string())?;

    let train_table = make_table(&mut rng, cfg, "train", cfg.n_train);
    let test_table = make_table(&mut rng, cfg, "test", cfg.n_test);
    let design = build_design(&train_table, cfg.n_groups > 1).map_err(|e| e.to_string())?;
    let d = design.n_columns();
    let nv = atlas.n_voxels();

    let mut truth = ModelState::zeros(cfg.n_train, nv, d, cfg.lag);
    truth.kappa = cfg.kappa;
    truth.tau2_eps = cfg.tau2_eps;
    truth.tau2_xi = cfg.tau2_xi;
    truth.sigma2_alpha = cfg.sigma2_alpha;
    truth.sigma2_beta = cfg.sigma2_beta;
    truth.cayley = CayleyParams::from_array(cfg.cayley);
    truth.pacf_eps = draw_pacf(&mut rng, cfg.lag, cfg.independent);
    truth.pacf_xi = draw_pacf(&mut rng, cfg.lag, cfg.independent);
    truth.pacf_alpha = draw_pacf(&mut rng, cfg.lag, cfg.independent);
    truth.pacf_beta = draw_pacf(&mut rng, cfg.lag, cfg.independent);

    let corr = |pacf: &PacfVector| -> Vec<ArCorrelation> {
        atlas.fibers().iter().map(|f| ArCorrelation::new(pacf, f.len()).expect("valid pacf")).collect()
    };
    let (ca, cb) = (corr(&truth.pacf_alpha), corr(&truth.pacf_beta));
    for (k, fiber) in atlas.fibers().iter().enumerate() {
        for c in 0..d {
            let a = ca[k].sample(&mut rng, truth.sigma2_alpha);
            let b = cb[k].sample(&mut rng, truth.sigma2_beta);
            for (j, &v) in fiber.iter().enumerate() {
                truth.alpha[(v, c)] = a[j];
                truth.beta[(v, c)] = b[j];
            }
        }
    }
    if let Some(p) = &cfg.planted {
        let cols: Vec<usize> = design
            .column_names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.as_str() == p.covariate || n.starts_with(&format!("{}:", p.covariate)))
            .map(|(j, _)| j)
            .collect();
        for &v in atlas.fiber(p.fiber) {
            for &c in &cols {
                truth.alpha[(v, c)] += p.shift;
                truth.beta[(v, c)] += p.shift;
            }
        }
    }

    let (ce, cx) = (corr(&truth.pacf_eps), corr(&truth.pacf_xi));
    let (et, ep, train_field) = draw_subjects(&mut rng, &atlas, &design.x, &truth, [&ce, &cx]);
    truth.eta_theta = et;
    truth.eta_phi = ep;
    let test_design = build_design(&test_table, cfg.n_groups > 1).map_err(|e| e.to_string())?;
    let (tt, tp, test_field) = draw_subjects(&mut rng, &atlas, &test_design.x, &truth, [&ce, &cx]);

    Ok(SyntheticData {
        atlas,
        train: Split { table: train_table, directions: train_field },
        test: Split { table: test_table, directions: test_field },
        truth: Truth { train: truth, test_eta_theta: tt, test_eta_phi: tp },
        config: cfg.clone(),
    })
}
