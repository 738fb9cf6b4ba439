use nalgebra::Vector3;
use vmfreg_core::geometry::separation_angle;
use vmfreg_core::inference::angular_expectation;
use vmfreg_core::mcmc::fit;
use vmfreg_core::model::{CovariateTable, DirectionField, ModelConfig, ModelData, StreamlineAtlas};
use vmfreg_core::rng::seeded_rng;
use vmfreg_core::vmf::VmfParams;
use vmfreg_core::UnitVector3;

fn small_data(kappa: f64) -> ModelData {
    let mut rng = seeded_rng(9);
    let atlas = StreamlineAtlas::chains(&[5, 4]).unwrap();
    let ids: Vec<String> = (0..6).map(|i| format!("s{i}")).collect();
    let values: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 / 5.0 - 0.5]).collect();
    let table = CovariateTable::new(ids, vec!["age".into()], values, None).unwrap();
    let mut field = DirectionField::new(6, 9);
    for i in 0..6 {
        for v in 0..9 {
            let mu = UnitVector3::from_vector(Vector3::new(1.0, 0.1 * v as f64, 0.3)).unwrap();
            let x = VmfParams::new(mu, kappa).unwrap().sample_one(&mut rng);
            field.set(i, v, x.to_array());
        }
    }
    ModelData::new(atlas, table, &field, false).unwrap()
}

#[test]
fn fit_keeps_the_configured_draws_and_repeats_per_seed() {
    let data = small_data(50.0);
    let cfg = ModelConfig { lag: 2, total: 300, burn_in: 100, thin: 4, ..Default::default() };
    let a = fit(&data, &cfg, 4).unwrap();
    let b = fit(&data, &cfg, 4).unwrap();
    assert_eq!(a.states.len(), 50);
    assert_eq!(a.states, b.states);
    let c = fit(&data, &cfg, 5).unwrap();
    assert_ne!(a.states, c.states);
}

#[test]
fn concentrated_data_pins_the_subject_modes() {
    let data = small_data(400.0);
    let cfg = ModelConfig { lag: 1, total: 1500, burn_in: 500, store_latent: true, ..Default::default() };
    let draws = fit(&data, &cfg, 2).unwrap();
    for i in 0..data.n_subjects() {
        for v in 0..data.n_voxels() {
            let modes: Vec<UnitVector3> = draws.states.iter().map(|s| s.mode(i, v)).collect();
            let est = angular_expectation(&modes).unwrap();
            let obs = data.direction(i, v).unwrap();
            assert!(separation_angle(&est, obs).to_degrees() < 10.0, "subject {i} voxel {v}");
        }
    }
}
