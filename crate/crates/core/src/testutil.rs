//! Small fixtures shared by unit tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::UnitVector3;
use crate::model::{CovariateTable, DirectionField, ModelData, ModelState, StreamlineAtlas};
use crate::rng::seeded_rng;
use crate::vmf::VmfParams;

/// Random dataset: `n` subjects, fibers of the given lengths, `c` normal
/// covariates, directions drawn around random modes with concentration 5.
pub fn random_data(n: usize, lengths: &[usize], c: usize, seed: u64) -> ModelData {
    let mut rng = seeded_rng(seed);
    let atlas = StreamlineAtlas::chains(lengths).unwrap();
    let nv = atlas.n_voxels();
    let values = (0..n).map(|_| (0..c).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let table = CovariateTable::new(
        (0..n).map(|i| format!("s{i}")).collect(),
        (0..c).map(|j| format!("x{}", j + 1)).collect(),
        values,
        None,
    )
    .unwrap();
    let mut field = DirectionField::new(n, nv);
    for i in 0..n {
        for v in 0..nv {
            let mu = UnitVector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.5).unwrap();
            let e = VmfParams::new(mu, 5.0).unwrap().sample_one(&mut rng);
            field.set(i, v, e.to_array());
        }
    }
    ModelData::new(atlas, table, &field, false).unwrap()
}

/// A state with every block perturbed away from zero.
pub fn random_state(data: &ModelData, lag: usize, seed: u64) -> ModelState {
    let mut rng = seeded_rng(seed);
    let mut s = ModelState::zeros(data.n_subjects(), data.n_voxels(), data.n_columns(), lag);
    let mut normal = |scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };
    for m in [&mut s.alpha, &mut s.beta, &mut s.eta_theta, &mut s.eta_phi] {
        m.iter_mut().for_each(|x| *x = normal(0.7));
    }
    s.cayley = crate::geometry::CayleyParams::new(normal(0.3), normal(0.3), normal(0.3));
    s.kappa = 3.0 + normal(0.5).abs();
    s.tau2_eps = 0.8;
    s.tau2_xi = 1.3;
    s.sigma2_alpha = 0.6;
    s.sigma2_beta = 1.7;
    let pacf = |v: Vec<f64>| crate::ar::PacfVector::new(v).unwrap();
    s.pacf_eps = pacf((0..lag).map(|k| 0.5 / (k + 1) as f64).collect());
    s.pacf_xi = pacf((0..lag).map(|k| -0.3 / (k + 1) as f64).collect());
    s.pacf_alpha = pacf((0..lag).map(|k| 0.7 / (k + 1) as f64).collect());
    s.pacf_beta = pacf((0..lag).map(|k| 0.2 / (k + 1) as f64).collect());
    s
}
