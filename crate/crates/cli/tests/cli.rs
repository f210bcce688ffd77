use std::path::Path;
use std::process::Command;

use bodycal::biomech::ResolvedModel;
use bodycal::sim::SensorNoise;
use bodycal::so3::angular_offset;
use bodycal_cli::config::{ExperimentConfig, Offset, Scenario};
use bodycal_cli::data::{read_calibration, read_imu_csv, write_calibration, write_imu_csv, ImuStreams};
use bodycal_cli::experiment::{
    cmd_calibrate, cmd_simulate, run_sweep, simulate_study, summarize_sweep, sweep_table, Classification, SWEEP_HEADER,
};
use bodycal_cli::CliError;

fn study_streams() -> (ResolvedModel, ImuStreams) {
    let cfg = ExperimentConfig::default();
    let model = cfg.model().unwrap();
    let (_, streams) = simulate_study(&cfg, &model);
    (model, streams)
}

fn line_of(e: CliError) -> usize {
    match e {
        CliError::Csv { line, .. } => line,
        other => panic!("expected a CSV error, got {other}"),
    }
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

#[test]
fn imu_csv_round_trips_losslessly() {
    let (_, streams) = study_streams();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("imu.csv");
    write_imu_csv(&p, &streams).unwrap();
    let back = read_imu_csv(&p, 2).unwrap();
    assert_eq!(back, streams);
    assert_eq!(back.samples.len(), 629);
}

#[test]
fn imu_csv_without_magnetometer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("imu.csv");
    write(&p, "t,imu_id,ax,ay,az,gx,gy,gz\n0,0,0,0,9.81,0,0,0\n0,1,0,0,9.81,0,0,0\n0.01,0,0,0,9.81,0,0,0\n0.01,1,0,0,9.81,0,0,0.5\n");
    let s = read_imu_csv(&p, 2).unwrap();
    assert_eq!(s.times, vec![0.0, 0.01]);
    assert!(s.samples.iter().flatten().all(|x| x.mag.is_none()));
    assert_eq!(s.samples[1][1].gyro.z, 0.5);
    assert_eq!(s.samples[1][1].t, 1);
}

#[test]
fn magnetometer_is_optional_per_row() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("imu.csv");
    write(&p, "t,imu_id,ax,ay,az,gx,gy,gz,mx,my,mz\n0,0,0,0,9.81,0,0,0,0.5,0,-0.8\n0,1,0,0,9.81,0,0,0,,,\n");
    let s = read_imu_csv(&p, 2).unwrap();
    assert!(s.samples[0][0].mag.is_some());
    assert!(s.samples[0][1].mag.is_none());
}

#[test]
fn shuffled_rows_are_rejected_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("imu.csv");
    write(&p, "t,imu_id,ax,ay,az,gx,gy,gz\n0.01,0,0,0,9.81,0,0,0\n0.01,1,0,0,9.81,0,0,0\n0,0,0,0,9.81,0,0,0\n0,1,0,0,9.81,0,0,0\n");
    let e = read_imu_csv(&p, 2).unwrap_err();
    assert!(e.to_string().contains("earlier"), "{e}");
    assert_eq!(line_of(e), 4);
}

#[test]
fn missing_sample_row_names_its_line() {
    let (_, streams) = study_streams();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("imu.csv");
    write_imu_csv(&p, &streams).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    // Line 43 holds (t = 20, IMU 1); the gap shows when t = 21 starts on the same line.
    lines.remove(42);
    write(&p, &(lines.join("\n") + "\n"));
    let e = read_imu_csv(&p, 2).unwrap_err();
    assert!(e.to_string().contains("IMU 1 has no sample at t = 0.2"), "{e}");
    assert_eq!(line_of(e), 43);

    // Missing at the very end.
    lines.truncate(lines.len() - 1);
    write(&p, &(lines.join("\n") + "\n"));
    assert!(read_imu_csv(&p, 2).is_err());
}

#[test]
fn malformed_fields_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("imu.csv");
    write(&p, "t,imu_id,ax,ay,az,gx,gy,gz\n0,0,0,0,9.81,0,0,0\n0,1,0,x,9.81,0,0,0\n");
    let e = read_imu_csv(&p, 2).unwrap_err();
    assert!(e.to_string().contains("ay"), "{e}");
    assert_eq!(line_of(e), 3);

    write(&p, "t,imu_id,ax,ay,az,gx,gy,gz\n0,0,0,0,9.81,0,0,0\n0,0,0,0,9.81,0,0,0\n");
    assert_eq!(line_of(read_imu_csv(&p, 2).unwrap_err()), 3);
    write(&p, "t,imu_id,ax,ay,az,gx,gy,gz\n0,2,0,0,9.81,0,0,0\n");
    assert_eq!(line_of(read_imu_csv(&p, 2).unwrap_err()), 2);
    write(&p, "time,imu,ax,ay,az,gx,gy,gz\n");
    assert_eq!(line_of(read_imu_csv(&p, 2).unwrap_err()), 1);
    write(&p, "t,imu_id,ax,ay,az,gx,gy,gz\n0,0,0,0,9.81,0,0\n");
    assert_eq!(line_of(read_imu_csv(&p, 2).unwrap_err()), 2);
}

#[test]
fn simulate_writes_study_streams() {
    let dir = tempfile::tempdir().unwrap();
    let s = cmd_simulate(&ExperimentConfig::default(), dir.path()).unwrap();
    assert_eq!((s.num_steps, s.num_imus), (629, 2));
    let streams = read_imu_csv(&dir.path().join("imu.csv"), 2).unwrap();
    assert_eq!(streams.samples.len(), 629);
    let cal = read_calibration(&dir.path().join("calibration.json")).unwrap();
    let target = bodycal::sim::study_calibration();
    for (a, b) in cal.iter().zip(&target) {
        assert_eq!(a.position, b.position);
        assert!(angular_offset(&a.orientation, &b.orientation) < 1e-12);
    }
    for f in ["segments.csv", "imu_states.csv"] {
        let n = std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
        assert_eq!(n, 1 + 629 * 2, "{f}");
    }
}

#[test]
fn minimal_simulation_is_valid() {
    let mut cfg = ExperimentConfig::default();
    cfg.simulation.num_steps = 2;
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, dir.path()).unwrap();
    assert_eq!(read_imu_csv(&dir.path().join("imu.csv"), 2).unwrap().samples.len(), 2);
}

#[test]
fn seeded_simulation_is_byte_identical() {
    let mut cfg = ExperimentConfig::default();
    cfg.simulation.sensor_noise = Some(SensorNoise::default());
    cfg.simulation.seed = 17;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    cmd_simulate(&cfg, a.path()).unwrap();
    cmd_simulate(&cfg, b.path()).unwrap();
    for f in ["imu.csv", "segments.csv", "imu_states.csv", "calibration.json", "simulate.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    cfg.simulation.seed = 18;
    cmd_simulate(&cfg, b.path()).unwrap();
    assert_ne!(std::fs::read(a.path().join("imu.csv")).unwrap(), std::fs::read(b.path().join("imu.csv")).unwrap());
}

#[test]
fn calibration_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cal.json");
    let cal = bodycal::sim::study_calibration();
    write_calibration(&p, &cal).unwrap();
    let back = read_calibration(&p).unwrap();
    for (a, b) in back.iter().zip(&cal) {
        assert_eq!(a.position, b.position);
        assert!(angular_offset(&a.orientation, &b.orientation) < 1e-12);
    }
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    write(&p, r#"{"body_model": "missing.json"}"#);
    assert!(matches!(ExperimentConfig::load(&p), Err(CliError::Config(_))));
    write(&p, r#"{"scenario": "sweep", "sweep": {"values_deg": []}}"#);
    assert!(matches!(ExperimentConfig::load(&p), Err(CliError::Config(_))));
    write(&p, r#"{"estimator": {"window": {"batch_size": 1}}}"#);
    assert!(ExperimentConfig::load(&p).is_err());
    write(&p, r#"{"scenario": "ablation", "ablation": {"offset": {"imu": 1, "beta_deg": -45, "gamma_deg": 45}}}"#);
    let cfg = ExperimentConfig::load(&p).unwrap();
    assert_eq!(cfg.scenario, Scenario::Ablation);
    assert_eq!(cfg.ablation.masks.len(), 4);
    assert_eq!(cfg.estimator.window.batch_size, 10);
}

#[test]
fn body_model_file_is_loaded() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    let mut body = bodycal::biomech::BodyModel::two_segment_study();
    body.world.sample_period = 0.02;
    write(&model, &serde_json::to_string(&body).unwrap());
    let p = dir.path().join("cfg.json");
    write(&p, r#"{"body_model": "model.json"}"#);
    let cfg = ExperimentConfig::load(&p).unwrap();
    assert_eq!(cfg.model().unwrap().world().sample_period, 0.02);
}

#[test]
fn classification_logic() {
    assert_eq!(Classification::of(true, &[0.5, 3.0], 10.0), Classification::TruePositive);
    assert_eq!(Classification::of(true, &[0.5, 12.0], 10.0), Classification::FalsePositive);
    assert_eq!(Classification::of(false, &[0.5, 3.0], 10.0), Classification::FalseNegative);
    assert_eq!(Classification::of(false, &[20.0, 3.0], 10.0), Classification::TrueNegative);
}

#[test]
fn small_sweep_is_deterministic_and_partitions() {
    let mut cfg = ExperimentConfig::default();
    cfg.simulation.num_steps = 100;
    cfg.sweep.imus = vec![0, 1];
    cfg.sweep.values_deg = vec![0.0, 20.0];
    let (rows, summary) = run_sweep(&cfg, 1).unwrap();
    assert_eq!(rows.len(), 8);
    assert_eq!(summary.true_positive + summary.true_negative + summary.false_positive + summary.false_negative, 8);
    assert_eq!(summary, summarize_sweep(&rows, 2));
    let zero = &rows[0];
    assert_eq!((zero.imu, zero.beta_deg, zero.gamma_deg), (0, 0.0, 0.0));
    assert!(zero.initial_offset_deg.abs() < 1e-9);
    let (again, _) = run_sweep(&cfg, 2).unwrap();
    assert_eq!(sweep_table(&rows), sweep_table(&again));
    assert_eq!(SWEEP_HEADER.len(), sweep_table(&rows)[0].len());
}

#[test]
fn calibrate_from_files_writes_self_describing_outputs() {
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&ExperimentConfig::default(), &dir.path().join("sim")).unwrap();
    let p = dir.path().join("cfg.json");
    write(
        &p,
        r#"{"scenario": "calibrate_from_file",
            "calibrate": {"imu_csv": "sim/imu.csv", "initial_calibration": "sim/calibration.json"}}"#,
    );
    let cfg = ExperimentConfig::load(&p).unwrap();
    let out = dir.path().join("cal");
    let r = cmd_calibrate(&cfg, &out).unwrap();
    assert_eq!(r.batches.len(), 70);
    assert!(r.batches.windows(2).all(|w| w[1].batch == w[0].batch + 1));
    assert!(r.errors.is_none());

    let mut rd = csv::Reader::from_path(out.join("batches.csv")).unwrap();
    assert_eq!(rd.headers().unwrap().len(), bodycal_cli::experiment::BATCH_HEADER.len());
    assert_eq!(rd.records().count(), 140);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["batches"].as_array().unwrap().len(), 70);
}

#[test]
fn recorded_data_needs_initial_calibration() {
    let dir = tempfile::tempdir().unwrap();
    cmd_simulate(&ExperimentConfig::default(), &dir.path().join("sim")).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.calibrate.imu_csv = Some(dir.path().join("sim/imu.csv"));
    assert!(matches!(cmd_calibrate(&cfg, &dir.path().join("out")), Err(CliError::Config(_))));
    cfg.calibrate.offset = Some(Offset { imu: 0, beta_deg: 10.0, gamma_deg: 0.0 });
    assert!(cmd_calibrate(&cfg, &dir.path().join("out")).is_ok());
}

#[test]
fn truth_start_stays_on_truth() {
    let dir = tempfile::tempdir().unwrap();
    let r = cmd_calibrate(&ExperimentConfig::default(), dir.path()).unwrap();
    let last = r.final_errors_deg().unwrap();
    assert!(last.iter().all(|e| *e < 0.01), "final q^SI errors {last:?} deg");
}

#[test]
fn binary_exposes_subcommands_and_flags() {
    let exe = env!("CARGO_BIN_EXE_bodycal");
    let help = Command::new(exe).arg("--help").output().unwrap();
    let text = String::from_utf8(help.stdout).unwrap();
    for sub in ["simulate", "calibrate", "sweep", "ablate"] {
        assert!(text.contains(sub), "{sub}");
    }
    let help = Command::new(exe).args(["sweep", "--help"]).output().unwrap();
    let text = String::from_utf8(help.stdout).unwrap();
    for flag in ["--config", "--out", "--jobs", "--seed", "--mode"] {
        assert!(text.contains(flag), "{flag}");
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let st = Command::new(exe).args(["simulate", "--seed", "3", "--mode", "soft", "--out"]).arg(&out).status().unwrap();
    assert!(st.success());
    assert!(out.join("imu.csv").is_file());
    let bad = Command::new(exe).args(["calibrate", "--config", "/nonexistent.json"]).output().unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error"));
}
