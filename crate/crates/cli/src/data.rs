//! CSV and JSON readers and writers.

use std::fs::File;
use std::path::Path;

use bodycal::biomech::{CalibrationEntry, I2SCalibration};
use bodycal::residuals::ImuSample;
use bodycal::sim::GroundTruth;
use bodycal::so3::{quat_from_wxyz, Quat, Vec3};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const IMU_HEADER: [&str; 8] = ["t", "imu_id", "ax", "ay", "az", "gx", "gy", "gz"];
pub const MAG_HEADER: [&str; 3] = ["mx", "my", "mz"];

/// Synchronised IMU streams indexed `[t][imu]`, with their timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuStreams {
    pub times: Vec<f64>,
    pub samples: Vec<Vec<ImuSample>>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::Csv { path: path.into(), line: e.position().map_or(0, |p| p.line() as usize), message: e.to_string() }
}

/// Shortest representation that parses back to the same value.
pub fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn push3(row: &mut Vec<String>, v: &Vec3) {
    row.extend(v.iter().map(|x| fmt(*x)));
}

fn push_quat(row: &mut Vec<String>, q: &Quat) {
    row.extend([q.w, q.i, q.j, q.k].map(fmt));
}

/// Writes one row per `(t, imu)`; magnetometer columns appear when every
/// sample carries one.
pub fn write_imu_csv(path: &Path, streams: &ImuStreams) -> Result<(), CliError> {
    let with_mag = streams.samples.iter().flatten().all(|s| s.mag.is_some());
    let mut w = csv_writer(path)?;
    let mut header: Vec<&str> = IMU_HEADER.to_vec();
    if with_mag {
        header.extend(MAG_HEADER);
    }
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (t, row) in streams.times.iter().zip(&streams.samples) {
        for (i, s) in row.iter().enumerate() {
            let mut rec = vec![fmt(*t), i.to_string()];
            push3(&mut rec, &s.acc);
            push3(&mut rec, &s.gyro);
            if let Some(m) = s.mag.filter(|_| with_mag) {
                push3(&mut rec, &m);
            }
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Parses an IMU CSV into aligned streams for `num_imus` sensors. Rows of one
/// time step must be contiguous. Magnetometer fields may be empty per row.
pub fn read_imu_csv(path: &Path, num_imus: usize) -> Result<ImuStreams, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).trim(csv::Trim::All).from_reader(file);
    let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_owned).collect();
    let has_mag = header.len() == 11 && header[8..] == MAG_HEADER;
    if header.len() < 8 || header[..8] != IMU_HEADER || !(header.len() == 8 || has_mag) {
        return Err(CliError::Csv {
            path: path.into(),
            line: 1,
            message: format!("expected header {}[,{}]", IMU_HEADER.join(","), MAG_HEADER.join(",")),
        });
    }

    let mut times: Vec<f64> = Vec::new();
    let mut samples: Vec<Vec<ImuSample>> = Vec::new();
    let mut current: Vec<Option<ImuSample>> = vec![None; num_imus];
    let mut group_line = 2;
    let close = |current: &mut Vec<Option<ImuSample>>, line: usize, t: f64| -> Result<Vec<ImuSample>, CliError> {
        if let Some(imu) = current.iter().position(Option::is_none) {
            return Err(CliError::Csv { path: path.into(), line, message: format!("IMU {imu} has no sample at t = {t}") });
        }
        Ok(current.iter_mut().map(|s| s.take().expect("checked")).collect())
    };

    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let err = |message: String| CliError::Csv { path: path.into(), line, message };
        if rec.len() != header.len() {
            return Err(err(format!("expected {} fields, found {}", header.len(), rec.len())));
        }
        let num = |k: usize| -> Result<f64, CliError> {
            rec[k].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("field {} is not numeric: {:?}", header[k], &rec[k])))
        };
        let t = num(0)?;
        let imu: usize = rec[1].parse().map_err(|_| err(format!("imu_id is not an index: {:?}", &rec[1])))?;
        if imu >= num_imus {
            return Err(err(format!("imu_id {imu} out of range for {num_imus} IMUs")));
        }
        let vec3 = |k: usize| -> Result<Vec3, CliError> { Ok(Vec3::new(num(k)?, num(k + 1)?, num(k + 2)?)) };
        let mag = if has_mag && !(rec[8].is_empty() && rec[9].is_empty() && rec[10].is_empty()) { Some(vec3(8)?) } else { None };

        match times.last() {
            Some(&last) if t < last => return Err(err(format!("time {t} is earlier than {last}"))),
            Some(&last) if t > last => {
                samples.push(close(&mut current, line, last)?);
                times.push(t);
                group_line = line;
            }
            Some(_) => {}
            None => {
                times.push(t);
                group_line = line;
            }
        }
        if current[imu].is_some() {
            return Err(err(format!("duplicate sample for IMU {imu} at t = {t}")));
        }
        current[imu] = Some(ImuSample { t: times.len() - 1, acc: vec3(2)?, gyro: vec3(5)?, mag });
    }
    match times.last() {
        Some(&last) => samples.push(close(&mut current, group_line, last)?),
        None => return Err(CliError::Csv { path: path.into(), line: 1, message: "no samples".into() }),
    }
    Ok(ImuStreams { times, samples })
}

/// Serialised form of one calibration entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    /// `q^SI` as `[w, x, y, z]`.
    pub orientation_wxyz: [f64; 4],
    /// `I^S`, metres.
    pub position: [f64; 3],
}

impl From<&CalibrationEntry> for CalibrationRecord {
    fn from(c: &CalibrationEntry) -> Self {
        let q = c.orientation;
        Self { orientation_wxyz: [q.w, q.i, q.j, q.k], position: [c.position.x, c.position.y, c.position.z] }
    }
}

impl From<&CalibrationRecord> for CalibrationEntry {
    fn from(r: &CalibrationRecord) -> Self {
        let [w, x, y, z] = r.orientation_wxyz;
        Self { orientation: quat_from_wxyz(w, x, y, z), position: Vec3::from(r.position) }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Json { path: path.into(), source: e })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn write_calibration(path: &Path, cal: &I2SCalibration) -> Result<(), CliError> {
    write_json(path, &cal.iter().map(CalibrationRecord::from).collect::<Vec<_>>())
}

pub fn read_calibration(path: &Path) -> Result<I2SCalibration, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let recs: Vec<CalibrationRecord> = serde_json::from_str(&text).map_err(|e| CliError::Json { path: path.into(), source: e })?;
    Ok(recs.iter().map(CalibrationEntry::from).collect())
}

/// Segment and IMU trajectories, one row per `(t, body)`.
pub fn write_truth_csv(dir: &Path, truth: &GroundTruth, sample_period: f64) -> Result<(), CliError> {
    let path = dir.join("segments.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["t", "segment", "px", "py", "pz", "qw", "qx", "qy", "qz"]).map_err(|e| csv_err(&path, e))?;
    for (k, row) in truth.segments.iter().enumerate() {
        for (s, seg) in row.iter().enumerate() {
            let mut rec = vec![fmt(k as f64 * sample_period), s.to_string()];
            push3(&mut rec, &seg.position);
            push_quat(&mut rec, &seg.orientation);
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = dir.join("imu_states.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["t", "imu_id", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz", "wx", "wy", "wz"])
        .map_err(|e| csv_err(&path, e))?;
    for (k, row) in truth.imus.iter().enumerate() {
        for (i, s) in row.iter().enumerate() {
            let mut rec = vec![fmt(k as f64 * sample_period), i.to_string()];
            push3(&mut rec, &s.position);
            push3(&mut rec, &s.velocity);
            push_quat(&mut rec, &s.orientation);
            push3(&mut rec, &s.angular_velocity);
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

/// Writes a CSV from a header and pre-formatted rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}
