use vmfreg_bench::evaluate::evaluate;
use vmfreg_bench::{simulate, PlantedEffect, SyntheticConfig};
use vmfreg_core::inference::{build_contrast, effect_map, ContrastSpec};
use vmfreg_core::mcmc::fit;
use vmfreg_core::model::ModelConfig;

#[test]
fn planted_streamline_dominates_the_effect_map() {
    let cfg = SyntheticConfig {
        n_fibers: 2,
        voxels_per_fiber: 10,
        n_train: 16,
        kappa: 100.0,
        tau2_eps: 0.05,
        tau2_xi: 0.05,
        sigma2_alpha: 0.05,
        sigma2_beta: 0.05,
        planted: Some(PlantedEffect { fiber: 0, covariate: "x2".into(), shift: 1.5 }),
        seed: 12,
        ..Default::default()
    };
    let syn = simulate(&cfg).unwrap();
    let data = syn.train_data().unwrap();
    let draws = fit(&data, &ModelConfig { lag: 2, total: 1500, burn_in: 600, ..Default::default() }, 3).unwrap();
    let spec = ContrastSpec::Switch { covariate: "x2".into(), from: 0.0, to: 1.0, group: None };
    let contrast = build_contrast(&spec, &data.table, &data.design).unwrap();
    let map = effect_map(&draws.states, &data.atlas, &[contrast], 0.65, 0.5).unwrap();
    let mean_m = |fiber: usize| {
        let rows: Vec<f64> = map.rows.iter().filter(|r| r.fiber == fiber).map(|r| r.m_mean).collect();
        rows.iter().sum::<f64>() / rows.len() as f64
    };
    assert!(mean_m(0) > mean_m(1) + 0.2, "{} vs {}", mean_m(0), mean_m(1));
    let flagged: Vec<usize> = map.flagged().map(|r| r.fiber).collect();
    assert!(!flagged.is_empty());
    assert!(flagged.iter().filter(|&&k| k == 0).count() * 10 >= flagged.len() * 7);
}

#[test]
fn observed_directions_score_zero_against_themselves() {
    let syn = simulate(&SyntheticConfig { n_fibers: 1, voxels_per_fiber: 4, ..Default::default() }).unwrap();
    let data = syn.test_data().unwrap();
    let d = &data;
    let obs: Vec<_> =
        (0..d.n_subjects()).flat_map(|i| (0..d.n_voxels()).filter_map(move |v| d.direction(i, v).copied())).collect();
    assert_eq!(obs.len(), data.n_subjects() * 4);
    let e = evaluate(&obs, &obs, None).unwrap();
    assert!(e.sep_angle < 1e-7 && e.rmse < 1e-7, "{e:?}");
}
