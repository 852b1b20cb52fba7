//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use debias_core::estimation::{
    assemble_design, fit, solve_ls, FitConfig, FitFlag, FittedModel, Observation, ParamMode, Strategy,
};
use debias_core::evaluation::{self, loocv, render_rows, Predictor, TableRow};
use debias_core::ingest::{build_observations, split_periods, Dataset};
use debias_core::mapops::{self, correct_map, GridMap};
use debias_core::model::{apply_bias, Device, DeviceKind, Measurement, Point, TimeSlot, ZoneParameters};
use debias_core::pipeline::{self, snapshot_dir, RunConfig, PROVENANCE_FILE};
use debias_core::synthgen::{
    generate_scene, oracle_ls, spec_to_json, Scene, SceneSpec, WhiteNoise,
};
use debias_core::zoning::{validate_identifiability, Zoning};

const EXACT_PARAM_REL_TOL: f64 = 1e-9;
const EXACT_MAP_REL_TOL: f64 = 1e-6;
const EXACT_RUNTIME_LIMIT: Duration = Duration::from_secs(10);
const EXACT_DAYS: u32 = 30;

const STAT_SIGMA: f64 = 2.0;
const STAT_SEEDS: u64 = 50;
const STAT_SE_MULTIPLE: f64 = 3.0;
const STAT_MIN_COVERAGE: f64 = 0.95;

const ORACLE_SYSTEMS: usize = 100;
const ORACLE_MAX_ROWS: usize = 200;
const ORACLE_MAX_COLS: usize = 26;
const ORACLE_TOL: f64 = 1e-8;

const BIAS_TO_NOISE: f64 = 5.0;

const RMSE_TOL: f64 = 1e-12;

const ZONING_POINTS: usize = 1000;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn dataset(scene: &Scene) -> Dataset {
    Dataset::new(scene.devices.clone(), scene.measurements.clone(), scene.stack.clone())
}

fn fit_all(ds: &Dataset, config: &FitConfig) -> Vec<FittedModel> {
    let rows = build_observations(ds).rows;
    Strategy::ALL
        .iter()
        .map(|s| fit(*s, &rows, &ds.devices, config).expect("fit"))
        .collect()
}

fn rel_err(est: f64, truth: f64) -> f64 {
    (est - truth).abs() / truth.abs().max(f64::MIN_POSITIVE)
}

/// Truth-zone parameters of the zone generated by `generator`.
fn truth_of(scene: &Scene, generator: &str, hour: u8) -> ZoneParameters {
    scene
        .true_zone_params(generator, hour)
        .expect("generator belongs to a truth zone")
}

fn exact_recovery() -> Outcome {
    let start = Instant::now();
    let scene = generate_scene(&SceneSpec::two_zone(7, 0.0, EXACT_DAYS)).map_err(|e| e.to_string())?;
    let ds = dataset(&scene);
    let models = fit_all(&ds, &FitConfig::default());
    let mut worst_param = 0.0f64;
    let mut worst_map = 0.0f64;
    let mut n_params = 0usize;
    let mut cells = 0usize;
    for model in &models {
        let tag = model.strategy.token();
        for z in &model.zones {
            let hour = z.hour.expect("hourly fit");
            check(!z.estimate.is_degenerate(), || format!("{tag}: zone {} hour {hour} degenerate", z.id))?;
            let truth = truth_of(&scene, &z.generator, hour);
            worst_param = worst_param
                .max(rel_err(z.estimate.params.c, truth.c))
                .max(rel_err(z.estimate.params.rho, truth.rho));
            n_params += 2;
        }
        for s in &model.sensors {
            let truth = scene.true_calibration(&s.id).expect("sensor in spec");
            let cal = s.estimate.calibration;
            check(s.estimate.is_usable(), || format!("{tag}: sensor {} unusable", s.id))?;
            worst_param = worst_param
                .max(rel_err(cal.alpha, truth.alpha))
                .max(rel_err(cal.beta, truth.beta));
            n_params += 2;
        }
        for slot in &scene.truth.slots {
            let initial = mapops::combine_initial(&scene.stack, slot).map_err(|e| e.to_string())?;
            let corrected = correct_map(&initial, model, slot.hour(), false);
            let truth = scene.truth.field(slot).expect("truth field");
            for (c, t) in corrected.grid.values.iter().zip(&truth.values) {
                worst_map = worst_map.max(rel_err(*c, *t));
                cells += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    check(worst_param <= EXACT_PARAM_REL_TOL, || {
        format!("parameter relative error {worst_param:.3e} > {EXACT_PARAM_REL_TOL:e}")
    })?;
    check(worst_map <= EXACT_MAP_REL_TOL, || {
        format!("map relative error {worst_map:.3e} > {EXACT_MAP_REL_TOL:e}")
    })?;
    check(elapsed <= EXACT_RUNTIME_LIMIT, || {
        format!("runtime {:.2}s > {:?}", elapsed.as_secs_f64(), EXACT_RUNTIME_LIMIT)
    })?;
    Ok(format!(
        "{n_params} parameters, max rel err {worst_param:.2e}; {cells} corrected cells, max rel err {worst_map:.2e}; {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn statistical_recovery() -> Outcome {
    let config = FitConfig {
        param_mode: ParamMode::Global,
        ..FitConfig::default()
    };
    // (covered, cases) per strategy, per seed
    let per_seed: Vec<Result<Vec<(usize, usize)>, String>> = (1..=STAT_SEEDS)
        .into_par_iter()
        .map(|seed| {
            let scene = generate_scene(&SceneSpec::two_zone(seed, STAT_SIGMA, EXACT_DAYS))
                .map_err(|e| e.to_string())?;
            let models = fit_all(&dataset(&scene), &config);
            Ok(models
                .iter()
                .map(|m| {
                    let mut covered = 0;
                    for z in &m.zones {
                        let truth = truth_of(&scene, &z.generator, 0);
                        let e = &z.estimate;
                        let inside = match (e.se_c, e.se_rho) {
                            (Some(sc), Some(sr)) => {
                                (e.params.c - truth.c).abs() <= STAT_SE_MULTIPLE * sc
                                    && (e.params.rho - truth.rho).abs() <= STAT_SE_MULTIPLE * sr
                            }
                            _ => false,
                        };
                        covered += inside as usize;
                    }
                    (covered, m.zones.len())
                })
                .collect())
        })
        .collect();
    let mut totals = vec![(0usize, 0usize); Strategy::ALL.len()];
    for r in per_seed {
        for (t, (c, n)) in totals.iter_mut().zip(r?) {
            t.0 += c;
            t.1 += n;
        }
    }
    let mut parts = Vec::new();
    let mut failed = Vec::new();
    for (s, (c, n)) in Strategy::ALL.iter().zip(&totals) {
        let cov = *c as f64 / *n as f64;
        parts.push(format!("{} {c}/{n} ({:.1}%)", s.token(), 100.0 * cov));
        if cov < STAT_MIN_COVERAGE {
            failed.push(s.token());
        }
    }
    let detail = parts.join(", ");
    if failed.is_empty() {
        Ok(format!("coverage within ±{STAT_SE_MULTIPLE} SE over {STAT_SEEDS} seeds: {detail}"))
    } else {
        Err(format!("coverage below {:.0}% for {failed:?}: {detail}", 100.0 * STAT_MIN_COVERAGE))
    }
}

/// Random dense matrix with a full-rank-friendly shape.
fn random_dense(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
    let cols = rng.gen_range(2..=ORACLE_MAX_COLS);
    let rows = rng.gen_range(cols + 2..=ORACLE_MAX_ROWS);
    let scale: f64 = 10f64.powf(rng.gen_range(-1.0..2.0));
    let a = DMatrix::from_fn(rows, cols, |_, _| scale * rng.gen_range(-1.0..1.0));
    let b = DVector::from_fn(rows, |_, _| rng.gen_range(-100.0..100.0));
    (a, b)
}

/// Design system of one zone with a random number of sensors.
fn random_design(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DVector<f64>) {
    let sensors = rng.gen_range(0..=(ORACLE_MAX_COLS - 2) / 2);
    let devices = 1 + sensors;
    let per_device = rng.gen_range(3..=ORACLE_MAX_ROWS / devices);
    let slot = TimeSlot::from_ymdh(2017, 1, 1, 0).unwrap();
    let mut rows = Vec::new();
    for d in 0..devices {
        let (id, kind) = if d == 0 {
            ("S".to_string(), DeviceKind::ReferenceStation)
        } else {
            (format!("M{d:02}"), DeviceKind::MicroSensor)
        };
        for i in 0..per_device {
            rows.push(Observation {
                device_id: id.clone(),
                kind,
                location: Point::new(0.0, 0.0),
                slot: slot.add_hours(i as i64),
                x: rng.gen_range(0.0..150.0),
                p_tilde: rng.gen_range(5.0..120.0),
            });
        }
    }
    let ds = assemble_design(&rows).expect("station present");
    (ds.matrix, ds.response)
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut largest = (0, 0);
    for i in 0..ORACLE_SYSTEMS {
        let (a, b) = if i % 2 == 0 { random_dense(&mut rng) } else { random_design(&mut rng) };
        let sol = debias_core::lstsq::solve(&a, &b).map_err(|e| format!("system {i}: {e}"))?;
        check(sol.rank == a.ncols(), || format!("system {i} is rank deficient"))?;
        let oracle = oracle_ls(&a, &b).map_err(|e| format!("system {i}: oracle {e}"))?;
        let scale = oracle.amax().max(1.0);
        let diff = (&sol.theta - &oracle).amax() / scale;
        worst = worst.max(diff);
        if a.nrows() * a.ncols() > largest.0 * largest.1 {
            largest = (a.nrows(), a.ncols());
        }
    }
    // the estimation entry point goes through the same solver
    let (a, b) = random_design(&mut rng);
    let ds = debias_core::estimation::DesignSystem {
        matrix: a.clone(),
        response: b.clone(),
        columns: Vec::new(),
        sensors: Vec::new(),
    };
    let via_estimation = solve_ls(&ds).map_err(|e| e.to_string())?;
    let oracle = oracle_ls(&a, &b).map_err(|e| e.to_string())?;
    worst = worst.max((&via_estimation.theta - &oracle).amax() / oracle.amax().max(1.0));
    check(worst <= ORACLE_TOL, || format!("max scaled difference {worst:.3e} > {ORACLE_TOL:e}"))?;
    Ok(format!(
        "{ORACLE_SYSTEMS} systems (largest {}x{}), max scaled difference {worst:.2e}",
        largest.0, largest.1
    ))
}

/// Two-zone scene whose bias exceeds `BIAS_TO_NOISE` noise deviations at
/// every station observation.
fn strong_bias_scene(seed: u64) -> Result<Scene, String> {
    let mut spec = SceneSpec::two_zone(seed, STAT_SIGMA, EXACT_DAYS);
    spec.zones[1].c = -12.0;
    let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
    let mut min_bias = f64::INFINITY;
    for d in scene.devices.iter().filter(|d| d.is_station()) {
        for slot in &scene.truth.slots {
            let p = scene.truth.value_at(slot, d.location).expect("station in grid");
            let zp = truth_of(&scene, &d.id, slot.hour());
            min_bias = min_bias.min((apply_bias(&zp, p) - p).abs());
        }
    }
    check(min_bias >= BIAS_TO_NOISE * STAT_SIGMA, || {
        format!("scene bias {min_bias:.2} below {BIAS_TO_NOISE}σ")
    })?;
    Ok(scene)
}

fn improvement() -> Outcome {
    let scene = strong_bias_scene(11)?;
    let ds = dataset(&scene);
    let learn_until = TimeSlot::from_ymdh(2017, 1, 20, 23).unwrap();
    let split = split_periods(&ds, learn_until).map_err(|e| e.to_string())?;
    let config = FitConfig::default();
    let models = fit_all(&split.learn, &config);
    let report = evaluation::evaluate(&split.test, &models, &config.hours, false).map_err(|e| e.to_string())?;
    let initial = report.method(Predictor::Initial.label()).expect("initial scores");
    let mut checked = 0;
    let mut worst_ratio = 0.0f64;
    for m in &models {
        let scores = report.method(m.strategy.token()).expect("strategy scores");
        for (si, station) in report.stations.iter().enumerate() {
            for (hi, h) in report.hours.iter().enumerate() {
                let (Some(c), Some(i)) = (scores.by_station_hour[si][hi], initial.by_station_hour[si][hi]) else {
                    return Err(format!("{station} hour {h}: no test pairs"));
                };
                check(c < i, || {
                    format!("{} at {station} hour {h}: {c:.3} not below initial {i:.3}", m.strategy.token())
                })?;
                worst_ratio = worst_ratio.max(c / i);
                checked += 1;
            }
        }
    }
    let cv = loocv(&ds, &Strategy::ALL, &config, learn_until, false).map_err(|e| e.to_string())?;
    let mean_initial = cv.mean_initial().ok_or("no initial CV score")?;
    let mut cv_parts = Vec::new();
    for s in Strategy::ALL {
        let mean = cv.mean_overall(s).ok_or("no CV score")?;
        check(mean < mean_initial, || {
            format!("{} mean LOOCV {mean:.3} not below initial {mean_initial:.3}", s.token())
        })?;
        cv_parts.push(format!("{} {mean:.2}", s.token()));
    }
    Ok(format!(
        "{checked} (strategy, station, hour) cells below initial (worst ratio {worst_ratio:.3}); mean LOOCV {} vs initial {mean_initial:.2}",
        cv_parts.join(", ")
    ))
}

fn table_row(station: &str, cells: [f64; 3]) -> TableRow {
    TableRow {
        station: station.into(),
        initial: None,
        scores: Strategy::ALL.iter().zip(cells).map(|(s, v)| (*s, Some(v))).collect(),
    }
}

fn protocol_fidelity() -> Outcome {
    // folds and Err(h)
    let scene = generate_scene(&SceneSpec::city(5, STAT_SIGMA, 6)).map_err(|e| e.to_string())?;
    let ds = dataset(&scene);
    let n_stations = scene.devices.iter().filter(|d| d.is_station()).count();
    let learn_until = TimeSlot::new(scene.spec.start_date, 23).unwrap().add_hours(3 * 24);
    let cv = loocv(&ds, &Strategy::ALL, &FitConfig::default(), learn_until, false).map_err(|e| e.to_string())?;
    for s in Strategy::ALL {
        let folds: Vec<_> = cv.folds_of(s).collect();
        check(folds.len() == n_stations, || {
            format!("{}: {} folds for {n_stations} stations", s.token(), folds.len())
        })?;
        let agg = cv.aggregate(s.token()).ok_or("missing aggregate")?;
        for hi in 0..cv.hours.len() {
            let mut sum = 0.0;
            for f in &folds {
                sum += f.err_by_hour[hi].ok_or("fold without score")?;
            }
            check(agg.err_sum[hi] == Some(sum), || {
                format!("{} hour {}: Err(h) {:?} != {sum}", s.token(), cv.hours[hi], agg.err_sum[hi])
            })?;
        }
    }

    // pooled RMSE over stations x times
    let rmse = rmse_four_pairs()?;
    check((rmse - 12.5f64.sqrt()).abs() <= RMSE_TOL, || format!("4-pair RMSE {rmse} != sqrt(12.5)"))?;

    // station table decisions on published numbers
    let published = [
        ("Grenoble Boulevards", [17.3, 44.7, 17.8], Strategy::NoMs),
        ("Grenoble Rocade Sud", [18.8, 38.7, 20.0], Strategy::NoMs),
        ("Grenoble Caserne de Bonne", [20.4, 20.1, 21.7], Strategy::MsAsSta),
        ("Fontaine Les Balmes", [15.1, 16.3, 15.8], Strategy::NoMs),
        ("Grenoble Les Frenes", [20.0, 21.6, 21.7], Strategy::NoMs),
        ("Saint-Martin-d'Hères", [18.7, 19.3, 19.7], Strategy::NoMs),
    ];
    let rows: Vec<TableRow> = published.iter().map(|(n, v, _)| table_row(n, *v)).collect();
    let rendered = render_rows(&rows);
    for ((name, values, expected), row) in published.iter().zip(&rows) {
        check(row.best() == vec![*expected], || format!("{name}: best {:?}", row.best()))?;
        let line = rendered.lines().find(|l| l.contains(name)).ok_or("row not rendered")?;
        let col = Strategy::ALL.iter().position(|s| s == expected).unwrap();
        let bold = format!("**{:.2}**", values[col]);
        check(line.matches("**").count() == 2 && line.contains(&bold), || {
            format!("{name}: rendered '{line}'")
        })?;
    }
    Ok(format!(
        "{n_stations} folds per strategy, Err(h) = fold sum at all {} hours; 4-pair RMSE {rmse:.13}; {} table rows bolded as published",
        cv.hours.len(),
        published.len()
    ))
}

/// Two stations, two days, one hour; initial map 0, observations 3,4 then 3,4.
fn rmse_four_pairs() -> Result<f64, String> {
    let fine = GridMap::filled(4, 4, 0.0, 0.0, 10.0, 0.0);
    let mut stack = mapops::MapStack::new(fine.clone());
    let devices = vec![Device::station("A", 5.0, 5.0), Device::station("B", 25.0, 25.0)];
    let mut measurements = Vec::new();
    for day in [1, 2] {
        let slot = TimeSlot::from_ymdh(2017, 3, day, 8).unwrap();
        stack.coarse.insert(slot, fine.clone());
        for (id, v) in [("A", 3.0), ("B", 4.0)] {
            measurements.push(Measurement {
                device_id: id.into(),
                slot,
                value: Some(v),
            });
        }
    }
    let ds = Dataset::new(devices, measurements, stack);
    let scores = evaluation::rmse_by_hour(&ds, Predictor::Initial, &[8], false);
    check(scores.pairs == 4, || format!("{} pairs instead of 4", scores.pairs))?;
    scores.by_hour[0].ok_or_else(|| "no score".to_string())
}

fn pathologies() -> Outcome {
    // constant initial map at one hour
    const FLAT_HOUR: u8 = 5;
    let mut scene = generate_scene(&SceneSpec::two_zone(3, 0.0, 10)).map_err(|e| e.to_string())?;
    let flat = {
        let first = scene.stack.coarse.values().next().ok_or("no coarse map")?;
        first.values.iter().sum::<f64>() / first.values.len() as f64
    };
    for (slot, grid) in scene.stack.coarse.iter_mut() {
        if slot.hour() == FLAT_HOUR {
            grid.values.iter_mut().for_each(|v| *v = flat);
        }
    }
    let ds = dataset(&scene);
    let models = fit_all(&ds, &FitConfig::default());
    let mut rank_deficient = 0;
    for m in &models {
        for z in &m.zones {
            let flagged = z.estimate.flags.contains(&FitFlag::RankDeficient);
            if z.hour == Some(FLAT_HOUR) {
                check(z.estimate.is_degenerate() && z.estimate.params.is_identity(), || {
                    format!("{}: zone {} at flat hour not degenerate: {:?}", m.strategy.token(), z.id, z.estimate.flags)
                })?;
                rank_deficient += flagged as usize;
            } else {
                check(!flagged, || format!("{}: hour {:?} flagged", m.strategy.token(), z.hour))?;
            }
        }
    }
    check(rank_deficient > 0, || "no RankDeficient flag at the flat hour".into())?;

    // white-noise sensor
    let mut spec = SceneSpec::two_zone(3, 0.0, EXACT_DAYS);
    spec.sensors[1].white_noise = Some(WhiteNoise { mean: 30.0, sd: 5.0 });
    let noisy = spec.sensors[1].id.clone();
    let scene = generate_scene(&spec).map_err(|e| e.to_string())?;
    let config = FitConfig {
        param_mode: ParamMode::Global,
        ..FitConfig::default()
    };
    let ds = dataset(&scene);
    let rows = build_observations(&ds).rows;
    let no_ms = fit(Strategy::NoMs, &rows, &ds.devices, &config).map_err(|e| e.to_string())?;
    let est = no_ms.sensor_estimate(&noisy, 0).ok_or("no estimate for the white-noise sensor")?;
    check(est.flags.contains(&FitFlag::DegenerateGain), || format!("white-noise sensor flags {:?}", est.flags))?;
    let ms = fit(Strategy::MsAsSta, &rows, &ds.devices, &config).map_err(|e| e.to_string())?;
    check(ms.zoning.zone_of_generator(&noisy).is_none(), || "white-noise sensor generates a zone".into())?;
    check(ms.omitted.iter().any(|o| o.id == noisy), || "white-noise sensor not listed as omitted".into())?;
    check(ms.contributing_sensors().iter().all(|s| s != &noisy), || "white-noise sensor contributes".into())?;

    // negative corrected values
    let scene = generate_scene(&SceneSpec::two_zone(3, 0.0, 2)).map_err(|e| e.to_string())?;
    let ds = dataset(&scene);
    let model = fit(Strategy::NoMs, &build_observations(&ds).rows, &ds.devices, &FitConfig::default())
        .map_err(|e| e.to_string())?;
    let slot = scene.truth.slots[12];
    let initial = mapops::combine_initial(&scene.stack, &slot).map_err(|e| e.to_string())?;
    // lower half of the map well under the zone offsets
    let low: Vec<f64> = initial
        .values
        .iter()
        .enumerate()
        .map(|(i, v)| if i % 2 == 0 { 1.0 } else { *v })
        .collect();
    let low = initial.with_values(low);
    let raw = correct_map(&low, &model, slot.hour(), false);
    let negatives = raw.grid.values.iter().filter(|v| **v < 0.0).count();
    check(negatives > 0, || "no negative corrected value".into())?;
    check(raw.total_clamped() == 0, || "clamp events without clamping".into())?;
    let clamped = correct_map(&low, &model, slot.hour(), true);
    check(clamped.grid.values.iter().all(|v| *v >= 0.0), || "negative value after clamping".into())?;
    check(clamped.total_clamped() == negatives, || {
        format!("{} clamp events for {negatives} negative cells", clamped.total_clamped())
    })?;
    Ok(format!(
        "flat hour: {rank_deficient} RankDeficient zones, identity fallback; white-noise sensor DegenerateGain and omitted from ms_as_sta; {negatives} negative cells kept unclamped, {} clamp events counted",
        clamped.total_clamped()
    ))
}

fn run_chain(root: &Path, spec_path: &Path) -> Result<(), String> {
    let scene_dir = root.join("scene");
    let mut sim = RunConfig::new("simulate", &scene_dir);
    sim.seed = Some(21);
    pipeline::cmd_simulate(spec_path, &sim).map_err(|e| e.to_string())?;
    let fit_cfg = RunConfig::new("fit", root.join("fit")).with_scene(&scene_dir);
    pipeline::cmd_fit(&fit_cfg).map_err(|e| e.to_string())?;
    let cv_cfg = RunConfig::new("cv", root.join("cv")).with_scene(&scene_dir);
    pipeline::cmd_cv(&cv_cfg).map_err(|e| e.to_string())?;
    Ok(())
}

fn without_provenance(snap: &BTreeMap<std::path::PathBuf, Vec<u8>>) -> BTreeMap<std::path::PathBuf, Vec<u8>> {
    snap.iter()
        .filter(|(p, _)| p.file_name().is_none_or(|n| n != PROVENANCE_FILE))
        .map(|(p, b)| (p.clone(), b.clone()))
        .collect()
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec_path = tmp.path().join("spec.json");
    std::fs::write(&spec_path, spec_to_json(&SceneSpec::two_zone(21, STAT_SIGMA, 40))).map_err(|e| e.to_string())?;
    let root = tmp.path().join("run");
    run_chain(&root, &spec_path)?;
    let first = snapshot_dir(&root);
    std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
    run_chain(&root, &spec_path)?;
    let second = snapshot_dir(&root);
    check(first.len() > 10, || format!("only {} artifacts", first.len()))?;
    if first != second {
        let differing: Vec<_> = first
            .keys()
            .filter(|k| first.get(*k) != second.get(*k))
            .map(|k| k.display().to_string())
            .collect();
        return Err(format!("artifacts differ: {differing:?}"));
    }
    // a second location only changes the recorded paths
    let other = tmp.path().join("elsewhere");
    run_chain(&other, &spec_path)?;
    check(without_provenance(&snapshot_dir(&other)) == without_provenance(&first), || {
        "artifacts differ between output locations".into()
    })?;
    let bytes: usize = first.values().map(Vec::len).sum();
    Ok(format!("{} artifacts ({bytes} bytes) byte-identical across reruns", first.len()))
}

fn nearest_generator(generators: &[Device], p: Point) -> usize {
    // ties go to the earliest generator
    let mut best = 0;
    for (i, g) in generators.iter().enumerate() {
        if g.location.dist2(&p) < generators[best].location.dist2(&p) {
            best = i;
        }
    }
    best
}

fn zoning_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut points_checked = 0;
    let mut networks = 0;
    for net in 0..20 {
        let n_st = rng.gen_range(1..8);
        let n_ms = rng.gen_range(0..12);
        let mut devices: Vec<Device> = (0..n_st)
            .map(|i| Device::station(format!("S{i:02}"), rng.gen_range(0.0..5000.0), rng.gen_range(0.0..5000.0)))
            .collect();
        devices.extend(
            (0..n_ms).map(|i| Device::sensor(format!("M{i:02}"), rng.gen_range(0.0..5000.0), rng.gen_range(0.0..5000.0))),
        );
        let all = Zoning::all_devices(&devices).map_err(|e| e.to_string())?;
        let stations = Zoning::stations_only(&devices).map_err(|e| e.to_string())?;
        check(validate_identifiability(&stations, &devices).is_ok(), || {
            format!("network {net}: stations-only zoning not identifiable")
        })?;
        for zoning in [&all, &stations] {
            let gens: Vec<Device> = (1..=zoning.len()).map(|k| zoning.generator(k).clone()).collect();
            for _ in 0..ZONING_POINTS / 20 {
                let p = Point::new(rng.gen_range(-500.0..5500.0), rng.gen_range(-500.0..5500.0));
                let zone = zoning.assign(p);
                let expected = nearest_generator(&gens, p);
                let (got, want) = (zoning.generator(zone), &gens[expected]);
                check(got.location.dist2(&p) == want.location.dist2(&p), || {
                    format!("network {net}: {p:?} assigned to {} but {} is nearer", got.id, want.id)
                })?;
                points_checked += 1;
            }
        }
        networks += 1;
    }
    check(points_checked >= ZONING_POINTS, || format!("only {points_checked} points"))?;

    let spec = SceneSpec::city(1, 0.0, 1);
    let devices = spec.devices();
    let k_st = Zoning::stations_only(&devices).map_err(|e| e.to_string())?.len();
    let k_all = Zoning::all_devices(&devices).map_err(|e| e.to_string())?.len();
    check(k_st == 9 && k_all == 21, || format!("city network gives K={k_st} and K={k_all}"))?;
    Ok(format!(
        "{points_checked} points over {networks} random networks at their nearest generator; stations-only always identifiable; city K={k_st} / K={k_all}"
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("exact recovery", exact_recovery),
        ("statistical recovery", statistical_recovery),
        ("oracle equivalence", oracle_equivalence),
        ("improvement", improvement),
        ("protocol fidelity", protocol_fidelity),
        ("pathologies", pathologies),
        ("determinism", determinism),
        ("zoning invariants", zoning_invariants),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failures += 1;
                println!("FAIL  {name} ({secs:.1}s): {reason}");
            }
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
