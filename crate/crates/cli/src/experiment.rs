//! Simulation, calibration, sweep and ablation runs.

use std::path::Path;

use bodycal::biomech::{I2SCalibration, ResolvedModel};
use bodycal::sim::{apply_offset, error_stats, synthesize_imu, AngleProfile, ErrorStats, GroundTruth, Stat};
use bodycal::so3::{angular_offset, Quat};
use bodycal::solver::TermMask;
use bodycal::window::{per_step_estimates, Estimator, EstimatorConfig, IndicatorTerms};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Offset};
use crate::data::{self, CalibrationRecord, ImuStreams};
use crate::CliError;

/// Ground truth and noiseless (or seeded noisy) signals of the study motion.
pub fn simulate_study(cfg: &ExperimentConfig, model: &ResolvedModel) -> (GroundTruth, ImuStreams) {
    let mut profile = AngleProfile::study(cfg.simulation.hinge_max_deg.to_radians());
    profile.num_steps = cfg.simulation.num_steps;
    let truth = GroundTruth::generate(model, &profile, &bodycal::sim::study_calibration());
    let noise = cfg.simulation.sensor_noise.map(|n| (n, cfg.simulation.seed));
    let samples = synthesize_imu(&truth, model.world(), noise);
    let dt = model.world().sample_period;
    let times = (0..samples.len()).map(|t| t as f64 * dt).collect();
    (truth, ImuStreams { times, samples })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub num_steps: usize,
    pub num_imus: usize,
    pub seed: u64,
    pub noisy: bool,
}

/// Writes `imu.csv`, `segments.csv`, `imu_states.csv`, `calibration.json`
/// and `simulate.json` to `out`.
pub fn cmd_simulate(cfg: &ExperimentConfig, out: &Path) -> Result<SimulateSummary, CliError> {
    let model = cfg.model()?;
    let (truth, streams) = simulate_study(cfg, &model);
    create_dir(out)?;
    data::write_imu_csv(&out.join("imu.csv"), &streams)?;
    data::write_truth_csv(out, &truth, model.world().sample_period)?;
    data::write_calibration(&out.join("calibration.json"), &truth.calibration)?;
    let summary = SimulateSummary {
        num_steps: truth.len(),
        num_imus: model.num_imus(),
        seed: cfg.simulation.seed,
        noisy: cfg.simulation.sensor_noise.is_some(),
    };
    data::write_json(&out.join("simulate.json"), &summary)?;
    Ok(summary)
}

/// State of the estimator after one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    pub first_step: usize,
    pub last_step: usize,
    pub time: f64,
    pub calibration: Vec<CalibrationRecord>,
    pub indicator: Option<IndicatorTerms>,
    pub detected: bool,
    pub iterations: usize,
    pub objective: f64,
    pub max_constraint_violation: f64,
    pub solver_converged: bool,
}

/// Per-step estimation errors of one IMU.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorSeries {
    /// Angular offset of `q^SI`, degrees.
    pub calibration_deg: Vec<f64>,
    /// Angular offset of `q^GS` of the IMU's segment, degrees.
    pub segment_deg: Vec<f64>,
    pub position_m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub batches: Vec<BatchRecord>,
    pub detection_batch: Option<usize>,
    pub detection_step: Option<usize>,
    pub final_calibration: Vec<CalibrationRecord>,
    /// Steps after this one enter `errors`.
    pub errors_from: usize,
    /// Per IMU; only when ground truth is known.
    pub errors: Option<Vec<ErrorStats>>,
    #[serde(skip)]
    pub series: Option<Vec<ErrorSeries>>,
    pub unconverged_solves: usize,
}

impl RunResult {
    /// Angular error of the last estimate per IMU, degrees.
    pub fn final_errors_deg(&self) -> Option<Vec<f64>> {
        self.series.as_ref().map(|s| s.iter().map(|e| e.calibration_deg.last().copied().unwrap_or(f64::NAN)).collect())
    }

    pub fn mean_errors_deg(&self) -> Option<Vec<f64>> {
        self.errors.as_ref().map(|e| e.iter().map(|s| s.orientation.mean).collect())
    }
}

/// Runs the estimator over a full stream. With ground truth, error
/// statistics cover the steps after detection, or after `fallback_from`
/// when nothing is detected.
pub fn run_estimation(
    model: &ResolvedModel,
    config: &EstimatorConfig,
    streams: &ImuStreams,
    initial: I2SCalibration,
    truth: Option<&GroundTruth>,
    fallback_from: usize,
) -> Result<RunResult, CliError> {
    let mut est = Estimator::new(model, config.clone(), initial)?;
    let outcomes = est.run(&streams.samples)?;
    let batches: Vec<BatchRecord> = outcomes
        .iter()
        .map(|o| BatchRecord {
            batch: o.batch,
            first_step: o.first_step,
            last_step: o.last_step,
            time: streams.times[o.last_step],
            calibration: o.solution.cal.iter().map(CalibrationRecord::from).collect(),
            indicator: o.indicator.clone(),
            detected: o.detected,
            iterations: o.report.iterations,
            objective: o.report.objective,
            max_constraint_violation: o.report.max_constraint_violation,
            solver_converged: o.report.converged,
        })
        .collect();
    let errors_from = est.state.converged_step.unwrap_or(fallback_from);
    let (errors, series) = match truth {
        Some(truth) => {
            let (cal, seg) = per_step_estimates(&outcomes, model.num_segments());
            let mut stats = Vec::new();
            let mut series = Vec::new();
            for i in 0..model.num_imus() {
                let s = model.imu_segment[i];
                let cal_i: Vec<_> = cal.iter().map(|c| c[i]).collect();
                let seg_i: Vec<Quat> = seg.iter().map(|q| q[s]).collect();
                let truth_seg: Vec<Quat> = truth.segments[..seg_i.len()].iter().map(|row| row[s].orientation).collect();
                let tc = &truth.calibration[i];
                stats.push(error_stats(&cal_i, &seg_i, tc, &truth_seg, errors_from));
                series.push(ErrorSeries {
                    calibration_deg: cal_i.iter().map(|c| angular_offset(&c.orientation, &tc.orientation)).collect(),
                    segment_deg: seg_i.iter().zip(&truth_seg).map(|(a, b)| angular_offset(a, b)).collect(),
                    position_m: cal_i.iter().map(|c| (c.position - tc.position).norm()).collect(),
                });
            }
            (Some(stats), Some(series))
        }
        None => (None, None),
    };
    Ok(RunResult {
        detection_batch: est.state.converged_batch,
        detection_step: est.state.converged_step,
        final_calibration: est.state.calibration.iter().map(CalibrationRecord::from).collect(),
        unconverged_solves: batches.iter().filter(|b| !b.solver_converged).count(),
        batches,
        errors_from,
        errors,
        series,
    })
}

/// The target calibration with `offset` applied.
pub fn offset_calibration(truth: &I2SCalibration, offset: &Offset) -> Result<I2SCalibration, CliError> {
    let mut cal = truth.clone();
    let entry = cal
        .get_mut(offset.imu)
        .ok_or_else(|| CliError::Config(format!("offset targets IMU {} of {}", offset.imu, truth.len())))?;
    *entry = apply_offset(entry, offset.beta_deg, offset.gamma_deg);
    Ok(cal)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), data::fmt)
}

fn create_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))
}

pub const BATCH_HEADER: [&str; 20] = [
    "batch", "first_step", "last_step", "time", "imu", "qw", "qx", "qy", "qz", "px", "py", "pz", "term_jv",
    "term_qsi", "term_is", "excitation", "detected", "iterations", "objective", "max_constraint",
];

pub fn batch_rows(result: &RunResult) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for b in &result.batches {
        for (i, c) in b.calibration.iter().enumerate() {
            let ind = b.indicator.as_ref();
            let mut r = vec![b.batch.to_string(), b.first_step.to_string(), b.last_step.to_string(), data::fmt(b.time), i.to_string()];
            r.extend(c.orientation_wxyz.iter().chain(&c.position).map(|v| data::fmt(*v)));
            r.extend([
                fmt_opt(ind.map(|t| t.joint_velocity)),
                fmt_opt(ind.map(|t| t.orientation)),
                fmt_opt(ind.map(|t| t.position)),
                fmt_opt(ind.map(|t| t.joint_excitation)),
                b.detected.to_string(),
                b.iterations.to_string(),
                data::fmt(b.objective),
                data::fmt(b.max_constraint_violation),
            ]);
            rows.push(r);
        }
    }
    rows
}

pub const SERIES_HEADER: [&str; 5] = ["step", "imu", "qsi_error_deg", "qsg_error_deg", "is_error_m"];

fn series_rows(series: &[ErrorSeries], prefix: &[String]) -> Vec<Vec<String>> {
    let n = series.first().map_or(0, |s| s.calibration_deg.len());
    let mut rows = Vec::new();
    for t in 0..n {
        for (i, s) in series.iter().enumerate() {
            let mut r = prefix.to_vec();
            r.extend([
                t.to_string(),
                i.to_string(),
                data::fmt(s.calibration_deg[t]),
                data::fmt(s.segment_deg[t]),
                data::fmt(s.position_m[t]),
            ]);
            rows.push(r);
        }
    }
    rows
}

/// Calibrates from the configured IMU file, or from simulated study data
/// when none is given. Writes `batches.csv`, `summary.json` and, with
/// ground truth, `errors.csv`.
pub fn cmd_calibrate(cfg: &ExperimentConfig, out: &Path) -> Result<RunResult, CliError> {
    let model = cfg.model()?;
    let (truth, streams) = match &cfg.calibrate.imu_csv {
        Some(p) => (None, data::read_imu_csv(p, model.num_imus())?),
        None => {
            let (t, s) = simulate_study(cfg, &model);
            (Some(t), s)
        }
    };
    let target = bodycal::sim::study_calibration();
    let initial = match (&cfg.calibrate.initial_calibration, &cfg.calibrate.offset) {
        (Some(p), _) => data::read_calibration(p)?,
        (None, Some(o)) => offset_calibration(&target, o)?,
        (None, None) if truth.is_some() => target,
        (None, None) => return Err(CliError::Config("recorded data needs an initial calibration file".into())),
    };
    if initial.len() != model.num_imus() {
        return Err(CliError::Config(format!("initial calibration has {} entries for {} IMUs", initial.len(), model.num_imus())));
    }
    let result = run_estimation(&model, &cfg.estimator, &streams, initial, truth.as_ref(), 0)?;
    create_dir(out)?;
    data::write_table(&out.join("batches.csv"), &BATCH_HEADER, &batch_rows(&result))?;
    if let Some(series) = &result.series {
        data::write_table(&out.join("errors.csv"), &SERIES_HEADER, &series_rows(series, &[]))?;
    }
    data::write_json(&out.join("summary.json"), &result)?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    TruePositive,
    TrueNegative,
    FalsePositive,
    FalseNegative,
}

impl Classification {
    /// A run is correct when every IMU's mean angular error is below the
    /// threshold.
    pub fn of(detected: bool, mean_errors_deg: &[f64], threshold_deg: f64) -> Self {
        let correct = mean_errors_deg.iter().all(|e| *e < threshold_deg);
        match (detected, correct) {
            (true, true) => Self::TruePositive,
            (true, false) => Self::FalsePositive,
            (false, true) => Self::FalseNegative,
            (false, false) => Self::TrueNegative,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::TruePositive => "TP",
            Self::TrueNegative => "TN",
            Self::FalsePositive => "FP",
            Self::FalseNegative => "FN",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub imu: usize,
    pub beta_deg: f64,
    pub gamma_deg: f64,
    /// Angular offset of the perturbed from the target `q^SI`, degrees.
    pub initial_offset_deg: f64,
    pub detected: bool,
    pub detection_step: Option<usize>,
    /// Per IMU: mean `q^SI` error, degrees.
    pub mean_calibration_error_deg: Vec<f64>,
    /// Per IMU: mean `q^SG` error, degrees.
    pub mean_segment_error_deg: Vec<f64>,
    /// Per IMU: mean `I^S` error, metres.
    pub mean_position_error_m: Vec<f64>,
    pub classification: Option<Classification>,
    /// Largest connected-segment violation after any batch solve.
    pub max_constraint_violation: f64,
    /// Set when the run failed; the row carries no results then.
    pub error: Option<String>,
    #[serde(skip)]
    pub stats: Option<Vec<ErrorStats>>,
    #[serde(skip)]
    pub post_errors: Option<Vec<ErrorSeries>>,
}

/// Pooled statistics over the post-detection steps of all true positives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergedStats {
    pub tests: usize,
    pub position_m: Stat,
    pub calibration_deg: Stat,
    pub segment_deg: Stat,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepSummary {
    pub tests: usize,
    pub true_positive: usize,
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub failed: usize,
    /// Per IMU of the model.
    pub converged: Vec<ConvergedStats>,
    pub detection_step_range: Option<(usize, usize)>,
}

pub fn sweep_points(cfg: &ExperimentConfig) -> Vec<Offset> {
    let v = &cfg.sweep.values_deg;
    cfg.sweep
        .imus
        .iter()
        .flat_map(|&imu| v.iter().flat_map(move |&b| v.iter().map(move |&g| Offset { imu, beta_deg: b, gamma_deg: g })))
        .collect()
}

fn sweep_one(cfg: &ExperimentConfig, model: &ResolvedModel, truth: &GroundTruth, streams: &ImuStreams, p: &Offset) -> SweepRow {
    let mut row = SweepRow {
        imu: p.imu,
        beta_deg: p.beta_deg,
        gamma_deg: p.gamma_deg,
        initial_offset_deg: f64::NAN,
        detected: false,
        detection_step: None,
        mean_calibration_error_deg: Vec::new(),
        mean_segment_error_deg: Vec::new(),
        mean_position_error_m: Vec::new(),
        classification: None,
        max_constraint_violation: f64::NAN,
        error: None,
        stats: None,
        post_errors: None,
    };
    let initial = match offset_calibration(&truth.calibration, p) {
        Ok(c) => c,
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    };
    row.initial_offset_deg = angular_offset(&initial[p.imu].orientation, &truth.calibration[p.imu].orientation);
    let fallback = cfg.sweep.undetected_error_from.get(p.imu).copied().unwrap_or(0);
    match run_estimation(model, &cfg.estimator, streams, initial, Some(truth), fallback) {
        Ok(r) => {
            let stats = r.errors.clone().expect("truth given");
            row.detected = r.detection_step.is_some();
            row.max_constraint_violation = r.batches.iter().map(|b| b.max_constraint_violation).fold(0.0, f64::max);
            row.detection_step = r.detection_step;
            row.mean_calibration_error_deg = stats.iter().map(|s| s.orientation.mean).collect();
            row.mean_segment_error_deg = stats.iter().map(|s| s.segment.mean).collect();
            row.mean_position_error_m = stats.iter().map(|s| s.position.mean).collect();
            row.classification =
                Some(Classification::of(row.detected, &row.mean_calibration_error_deg, cfg.sweep.error_threshold_deg));
            row.post_errors = r.series.map(|s| {
                let from = (r.errors_from + 1).min(s.first().map_or(0, |e| e.calibration_deg.len()));
                s.into_iter()
                    .map(|e| ErrorSeries {
                        calibration_deg: e.calibration_deg[from..].to_vec(),
                        segment_deg: e.segment_deg[from..].to_vec(),
                        position_m: e.position_m[from..].to_vec(),
                    })
                    .collect()
            });
            row.stats = Some(stats);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every grid point on `jobs` worker threads; rows come back in grid
/// order regardless of the worker count.
pub fn run_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<(Vec<SweepRow>, SweepSummary), CliError> {
    let model = cfg.model()?;
    let (truth, streams) = simulate_study(cfg, &model);
    let points = sweep_points(cfg);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    let rows: Vec<SweepRow> = pool.install(|| points.par_iter().map(|p| sweep_one(cfg, &model, &truth, &streams, p)).collect());
    let summary = summarize_sweep(&rows, model.num_imus());
    Ok((rows, summary))
}

pub fn summarize_sweep(rows: &[SweepRow], num_imus: usize) -> SweepSummary {
    let mut s = SweepSummary { tests: rows.len(), ..SweepSummary::default() };
    for r in rows {
        match r.classification {
            Some(Classification::TruePositive) => s.true_positive += 1,
            Some(Classification::TrueNegative) => s.true_negative += 1,
            Some(Classification::FalsePositive) => s.false_positive += 1,
            Some(Classification::FalseNegative) => s.false_negative += 1,
            None => s.failed += 1,
        }
    }
    let tp: Vec<&SweepRow> = rows.iter().filter(|r| r.classification == Some(Classification::TruePositive)).collect();
    s.converged = (0..num_imus)
        .map(|i| {
            let pool = |f: fn(&ErrorSeries) -> &Vec<f64>| -> Vec<f64> {
                tp.iter().filter_map(|r| r.post_errors.as_ref()).flat_map(|e| f(&e[i]).iter().copied()).collect()
            };
            ConvergedStats {
                tests: tp.len(),
                position_m: Stat::of(&pool(|e| &e.position_m)),
                calibration_deg: Stat::of(&pool(|e| &e.calibration_deg)),
                segment_deg: Stat::of(&pool(|e| &e.segment_deg)),
            }
        })
        .collect();
    let steps: Vec<usize> = tp.iter().filter_map(|r| r.detection_step).collect();
    s.detection_step_range = steps.iter().min().zip(steps.iter().max()).map(|(a, b)| (*a, *b));
    s
}

pub const SWEEP_HEADER: [&str; 16] = [
    "imu", "beta_deg", "gamma_deg", "initial_offset_deg", "detected", "detection_step", "qsi_error_i0_deg",
    "qsi_error_i1_deg", "qsg_error_i0_deg", "qsg_error_i1_deg", "is_error_i0_m", "is_error_i1_m",
    "max_constraint_violation", "class", "error", "note",
];

/// One CSV row per test. Columns for IMU errors assume two IMUs; further
/// IMUs are appended to the note column.
pub fn sweep_table(rows: &[SweepRow]) -> Vec<Vec<String>> {
    let at = |v: &[f64], i: usize| v.get(i).map_or(String::new(), |x| data::fmt(*x));
    rows.iter()
        .map(|r| {
            let extra: Vec<String> = (2..r.mean_calibration_error_deg.len())
                .map(|i| format!("qsi_i{i}={}", data::fmt(r.mean_calibration_error_deg[i])))
                .collect();
            vec![
                r.imu.to_string(),
                data::fmt(r.beta_deg),
                data::fmt(r.gamma_deg),
                data::fmt(r.initial_offset_deg),
                r.detected.to_string(),
                r.detection_step.map_or(String::new(), |s| s.to_string()),
                at(&r.mean_calibration_error_deg, 0),
                at(&r.mean_calibration_error_deg, 1),
                at(&r.mean_segment_error_deg, 0),
                at(&r.mean_segment_error_deg, 1),
                at(&r.mean_position_error_m, 0),
                at(&r.mean_position_error_m, 1),
                data::fmt(r.max_constraint_violation),
                r.classification.map_or("", |c| c.label()).to_string(),
                r.error.clone().unwrap_or_default(),
                extra.join(";"),
            ]
        })
        .collect()
}

/// Writes `sweep.csv` and `sweep.json`.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<(Vec<SweepRow>, SweepSummary), CliError> {
    let (rows, summary) = run_sweep(cfg, jobs)?;
    create_dir(out)?;
    data::write_table(&out.join("sweep.csv"), &SWEEP_HEADER, &sweep_table(&rows))?;
    data::write_json(&out.join("sweep.json"), &summary)?;
    Ok((rows, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: String,
    pub detection_step: Option<usize>,
    /// Per IMU: `q^SI` error at the last step, degrees.
    pub final_error_deg: Vec<f64>,
    #[serde(skip)]
    pub series: Vec<ErrorSeries>,
}

/// Runs the configured offset test once per term mask.
pub fn run_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<AblationRow>, CliError> {
    let model = cfg.model()?;
    let (truth, streams) = simulate_study(cfg, &model);
    let initial = offset_calibration(&truth.calibration, &cfg.ablation.offset)?;
    let run = |mask: &TermMask| -> Result<AblationRow, CliError> {
        let est = EstimatorConfig { mask: *mask, ..cfg.estimator.clone() };
        let r = run_estimation(&model, &est, &streams, initial.clone(), Some(&truth), 0)?;
        Ok(AblationRow {
            mask: mask.label(),
            detection_step: r.detection_step,
            final_error_deg: r.final_errors_deg().expect("truth given"),
            series: r.series.expect("truth given"),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| cfg.ablation.masks.par_iter().map(run).collect())
}

/// Writes `ablation.csv` (error series per mask) and `ablation.json`.
pub fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Vec<AblationRow>, CliError> {
    let rows = run_ablation(cfg, jobs)?;
    create_dir(out)?;
    let mut header = vec!["mask"];
    header.extend(SERIES_HEADER);
    let table: Vec<Vec<String>> = rows.iter().flat_map(|r| series_rows(&r.series, &[r.mask.clone()])).collect();
    data::write_table(&out.join("ablation.csv"), &header, &table)?;
    data::write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}
