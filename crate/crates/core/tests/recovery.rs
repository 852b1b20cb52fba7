use proptest::prelude::{prop_assert, proptest, ProptestConfig};

use debias_core::estimation::{
    fit, recover_parameters, FitConfig, FitFlag, ParamMode, Strategy,
};
use debias_core::ingest::{build_observations, Dataset};
use debias_core::mapops::{combine_initial, correct_map};
use debias_core::synthgen::{generate_scene, CoarseMode, Scene, SceneSpec};

fn dataset(scene: &Scene) -> Dataset {
    Dataset::new(scene.devices.clone(), scene.measurements.clone(), scene.stack.clone())
}

/// Largest relative difference between corrected maps and the true field.
fn map_error(scene: &Scene, strategy: Strategy, hours: &[u8]) -> f64 {
    let ds = dataset(scene);
    let config = FitConfig {
        hours: hours.to_vec(),
        ..FitConfig::default()
    };
    let model = fit(strategy, &build_observations(&ds).rows, &ds.devices, &config).unwrap();
    let mut worst = 0.0f64;
    for slot in scene.truth.slots.iter().filter(|s| hours.contains(&s.hour())) {
        let initial = combine_initial(&scene.stack, slot).unwrap();
        let corrected = correct_map(&initial, &model, slot.hour(), false);
        let truth = scene.truth.field(slot).unwrap();
        for (c, t) in corrected.grid.values.iter().zip(&truth.values) {
            worst = worst.max((c - t).abs() / t.abs());
        }
    }
    worst
}

#[test]
fn coarse_grid_scene_is_recovered_end_to_end() {
    let scene = generate_scene(&SceneSpec::city(8, 0.0, 4)).unwrap();
    for strategy in [Strategy::NoMs, Strategy::Pool] {
        let err = map_error(&scene, strategy, &[0, 7, 13, 22]);
        assert!(err < 1e-6, "{strategy}: {err:e}");
    }

    let mut spec = SceneSpec::two_zone(8, 0.0, 6);
    spec.coarse = CoarseMode::Coarse { cellsize: 400.0 };
    let scene = generate_scene(&spec).unwrap();
    assert!(!scene.stack.coarse.values().next().unwrap().same_geometry(&scene.stack.fine));
    for strategy in Strategy::ALL {
        let err = map_error(&scene, strategy, &[3, 17]);
        assert!(err < 1e-6, "{strategy}: {err:e}");
    }
}

#[test]
fn hourly_fit_ignores_other_hours() {
    let scene = generate_scene(&SceneSpec::two_zone(5, 2.0, 8)).unwrap();
    let ds = dataset(&scene);
    let rows = build_observations(&ds).rows;
    let config = FitConfig {
        hours: vec![9],
        ..FitConfig::default()
    };
    // scramble every other hour: reverse their order and perturb their values
    let mut scrambled: Vec<_> = rows.iter().filter(|o| o.slot.hour() != 9).cloned().collect();
    scrambled.reverse();
    for o in &mut scrambled {
        o.x = o.x * 3.0 + 100.0;
    }
    let hour9: Vec<_> = rows.iter().filter(|o| o.slot.hour() == 9).cloned().collect();
    let mut mixed = scrambled;
    mixed.extend(hour9);
    for strategy in Strategy::ALL {
        let a = fit(strategy, &rows, &ds.devices, &config).unwrap();
        let b = fit(strategy, &mixed, &ds.devices, &config).unwrap();
        assert_eq!(a.zones, b.zones, "{strategy}");
        assert_eq!(a.sensors, b.sensors, "{strategy}");
    }
}

#[test]
fn sensor_zone_errors_include_the_base_fit() {
    let scene = generate_scene(&SceneSpec::two_zone(12, 2.0, 30)).unwrap();
    let ds = dataset(&scene);
    let rows = build_observations(&ds).rows;
    let config = FitConfig {
        param_mode: ParamMode::Global,
        ..FitConfig::default()
    };
    let base = fit(Strategy::NoMs, &rows, &ds.devices, &config).unwrap();
    let ms = fit(Strategy::MsAsSta, &rows, &ds.devices, &config).unwrap();
    let mut sensor_zones = 0;
    for z in &ms.zones {
        let gen = ms.zoning.generator(z.id);
        if gen.is_station() {
            continue;
        }
        sensor_zones += 1;
        assert!(!z.estimate.flags.contains(&FitFlag::InheritedFromBase));
        let b = base.zone_estimate(base.zoning.assign(gen.location), 0).unwrap();
        assert!(z.estimate.se_c.unwrap() >= b.se_c.unwrap());
        assert!(z.estimate.se_rho.unwrap() >= b.se_rho.unwrap());
    }
    assert_eq!(sensor_zones, 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn parameter_recovery_inverts_the_parameterization(
        c in -50.0f64..50.0,
        rho in -0.9f64..3.0,
        cals in proptest::collection::vec((0.1f64..5.0, -20.0f64..20.0), 0..6),
    ) {
        // theta from the true parameters
        let t1 = 1.0 / (1.0 + rho);
        let mut theta = vec![t1, c * t1];
        theta.extend(cals.iter().map(|(a, _)| a * t1));
        theta.extend(cals.iter().map(|(a, b)| b - a * t1 * c));
        let (zp, got) = recover_parameters(&theta, cals.len()).unwrap();
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1.0);
        prop_assert!(close(zp.c, c) && close(zp.rho, rho), "{zp:?}");
        for ((a, b), g) in cals.iter().zip(&got) {
            prop_assert!(close(g.alpha, *a) && close(g.beta, *b), "{g:?}");
        }
    }
}
