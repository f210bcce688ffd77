use bodycal::biomech::{BodyModel, ResolvedModel};
use bodycal::residuals::ImuSample;
use bodycal::sim::{apply_offset, study_calibration, synthesize_imu, AngleProfile, GroundTruth};
use bodycal::so3::{angular_offset, log_rotvec, quat_mul, Quat};
use bodycal::solver::ConstraintMode;
use bodycal::window::{per_step_estimates, Estimator, EstimatorConfig};

fn model() -> ResolvedModel {
    ResolvedModel::new(BodyModel::two_segment_study()).unwrap()
}

fn study(model: &ResolvedModel) -> (GroundTruth, Vec<Vec<ImuSample>>) {
    let truth = GroundTruth::generate(model, &AngleProfile::study(162f64.to_radians()), &study_calibration());
    let samples = synthesize_imu(&truth, model.world(), None);
    (truth, samples)
}

fn truth_anchored<'m>(model: &'m ResolvedModel, truth: &GroundTruth, config: EstimatorConfig) -> Estimator<'m> {
    let mut est = Estimator::new(model, config, truth.calibration.clone()).unwrap();
    est.state.initial_orientations = Some(truth.imus[0].iter().map(|s| s.orientation).collect());
    est
}

#[test]
fn truth_start_detects_at_first_eligible_batch() {
    let m = model();
    let (truth, samples) = study(&m);
    let mut est = truth_anchored(&m, &truth, EstimatorConfig::default());
    let out = est.run(&samples).unwrap();
    assert_eq!(out.len(), 70);
    let h = est.config.window.history;
    assert_eq!(est.state.converged_batch, Some(h + 1));
    assert_eq!(est.state.converged_step, Some((h + 2) * 9));
    assert!(out[..=h].iter().all(|o| o.indicator.is_none()));
    assert_eq!(out.iter().filter(|o| o.detected).count(), 1);

    // Tightened once.
    let base = EstimatorConfig::default().noise.calib_orientation_change.0[(0, 0)];
    let now = est.state.noise.calib_orientation_change.0[(0, 0)];
    assert!((now - base / 10.0).abs() < 1e-12);

    let worst = out
        .iter()
        .flat_map(|o| o.solution.cal.iter().zip(&truth.calibration))
        .map(|(a, b)| angular_offset(&a.orientation, &b.orientation))
        .fold(0.0, f64::max);
    assert!(worst < 1.0, "{worst}°");
}

#[test]
fn seams_are_continuous() {
    let m = model();
    let (truth, samples) = study(&m);
    let mut est = truth_anchored(&m, &truth, EstimatorConfig::default());
    let out = est.run(&samples[..200]).unwrap();
    for pair in out.windows(2) {
        let (a, b) = (&pair[0].solution, &pair[1].solution);
        for i in 0..2 {
            let prev: &Quat = &a.imu[a.len() - 1][i].orientation;
            let next = &b.imu[0][i].orientation;
            let jump = log_rotvec(&quat_mul(&prev.conjugate(), next)).norm();
            assert!(jump < 1e-3, "batch {} imu {i}: {jump}", pair[1].batch);
        }
    }
}

#[test]
fn later_batches_start_from_previous_anchor() {
    let m = model();
    let (truth, samples) = study(&m);
    let mut est = truth_anchored(&m, &truth, EstimatorConfig::default());
    let first = est.step(&samples[0..10], 0).unwrap();
    let (x, anchors) = est.init_batch(&samples[9..19]).unwrap();
    let last = &first.solution.imu[9];
    for t in 0..10 {
        assert_eq!(&x.imu[t], last);
        assert_eq!(x.seg[t], first.solution.seg[9]);
    }
    assert_eq!(x.cal, first.solution.cal);
    assert_eq!(anchors, last.iter().map(|s| s.orientation).collect::<Vec<_>>());
}

#[test]
fn first_batch_of_a_static_stream_is_at_rest() {
    let m = model();
    let mut profile = AngleProfile::study(162f64.to_radians());
    profile.amplitude = 0.0;
    profile.num_steps = 10;
    let truth = GroundTruth::generate(&m, &profile, &study_calibration());
    let samples = synthesize_imu(&truth, m.world(), None);
    let est = Estimator::new(&m, EstimatorConfig::default(), study_calibration()).unwrap();
    let (x, anchors) = est.init_batch(&samples).unwrap();
    for row in &x.imu {
        for (i, s) in row.iter().enumerate() {
            assert_eq!(s.velocity.norm(), 0.0);
            assert!(angular_offset(&s.orientation, &truth.imus[0][i].orientation) < 1e-6);
            assert_eq!(s.orientation, anchors[i]);
        }
    }
}

#[test]
fn static_stream_never_detects() {
    let m = model();
    let mut profile = AngleProfile::study(162f64.to_radians());
    profile.amplitude = 0.0;
    profile.num_steps = 50 * 9 + 1;
    let truth = GroundTruth::generate(&m, &profile, &study_calibration());
    let samples = synthesize_imu(&truth, m.world(), None);
    let initial = vec![apply_offset(&study_calibration()[0], 30.0, 30.0), apply_offset(&study_calibration()[1], -30.0, 20.0)];
    let mut est = Estimator::new(&m, EstimatorConfig::default(), initial).unwrap();
    let out = est.run(&samples).unwrap();
    assert_eq!(out.len(), 50);
    assert_eq!(est.state.converged_batch, None);
}

#[test]
fn runs_are_deterministic() {
    let m = model();
    let (truth, samples) = study(&m);
    let initial = vec![apply_offset(&truth.calibration[0], 25.0, -25.0), truth.calibration[1]];
    let run = || {
        let mut est = Estimator::new(&m, EstimatorConfig::default(), initial.clone()).unwrap();
        est.run(&samples[..120]).unwrap().into_iter().map(|o| (o.solution, o.report)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn soft_mode_tracks_hard_mode_from_truth() {
    let m = model();
    let (truth, samples) = study(&m);
    let mut cals = Vec::new();
    for mode in [ConstraintMode::Hard, ConstraintMode::Soft] {
        let mut cfg = EstimatorConfig::default();
        cfg.solver.mode = mode;
        let mut est = truth_anchored(&m, &truth, cfg);
        est.run(&samples[..181]).unwrap();
        cals.push(est.state.calibration);
    }
    for (a, b) in cals[0].iter().zip(&cals[1]) {
        let ang = angular_offset(&a.orientation, &b.orientation);
        assert!(ang < 0.1, "{ang}°");
        assert!((a.position - b.position).norm() < 1e-3);
    }
}

#[test]
fn moving_horizon_slides_one_step() {
    let m = model();
    let (truth, samples) = study(&m);
    let mut est = truth_anchored(&m, &truth, config_mh());
    let first = est.step(&samples[0..10], 0).unwrap();
    let (x, anchors) = est.init_batch(&samples[1..11]).unwrap();
    assert_eq!(x.imu[0], first.solution.imu[1]);
    for t in 1..9 {
        assert_eq!(x.imu[t], first.solution.imu[t + 1]);
        assert_eq!(x.seg[t], first.solution.seg[t + 1]);
    }
    assert_eq!(x.imu[9], first.solution.imu[9]);
    assert_eq!(anchors, first.solution.imu[1].iter().map(|s| s.orientation).collect::<Vec<_>>());

    let mut est = truth_anchored(&m, &truth, config_mh());
    let out = est.run(&samples[..40]).unwrap();
    assert_eq!(out.len(), 31);
    assert!(out.windows(2).all(|p| p[1].first_step == p[0].first_step + 1));
    let (cal, seg) = per_step_estimates(&out, 2);
    assert_eq!(cal.len(), 40);
    assert_eq!(seg.len(), 40);
    let worst = cal
        .iter()
        .flat_map(|c| c.iter().zip(&truth.calibration))
        .map(|(a, b)| angular_offset(&a.orientation, &b.orientation))
        .fold(0.0, f64::max);
    assert!(worst < 1.0, "{worst}°");
}

fn config_mh() -> EstimatorConfig {
    let mut config = EstimatorConfig::default();
    config.window.moving_horizon = true;
    config
}
