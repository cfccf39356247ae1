//! Dataset records, the on-disk layout, window slicing with velocity
//! targets, and per-channel standardization.
//!
//! On disk a dataset is `<root>/manifest.txt` (one sequence directory name
//! per line, UTF-8, LF) and, per sequence directory, serialized tensors
//! named `time` (`[N]`), `gyro` (`[3,N]`), `accel` (`[3,N]`), `gt_pos`
//! (`[2,N]`), and optionally `gt_yaw` (`[N]`), all f64.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::InputStats;
use crate::tensor::{Element, Tensor};

/// One recorded (or synthesized) IMU sequence with planar ground truth.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub name: String,
    /// Seconds, strictly increasing, near-uniform rate.
    pub timestamps: Vec<f64>,
    /// Body-frame angular rate, rad/s, `[3, N]`.
    pub gyro: Tensor<f64>,
    /// Body-frame specific force including gravity, m/s^2, `[3, N]`.
    pub accel: Tensor<f64>,
    /// World-frame planar position, meters, `[2, N]`.
    pub gt_pos: Tensor<f64>,
    /// Heading, radians.
    pub gt_yaw: Option<Vec<f64>>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn duration(&self) -> f64 {
        if self.timestamps.len() < 2 {
            0.0
        } else {
            self.timestamps[self.timestamps.len() - 1] - self.timestamps[0]
        }
    }

    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Dataset {
            name: self.name.clone(),
            detail: detail.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.timestamps.len();
        if n < 2 {
            return Err(self.err("needs at least 2 samples"));
        }
        for (label, t, rows) in [
            ("gyro", &self.gyro, 3),
            ("accel", &self.accel, 3),
            ("gt_pos", &self.gt_pos, 2),
        ] {
            if t.shape() != [rows, n] {
                return Err(self.err(format!(
                    "array `{}` has shape {:?}, expected [{}, {}]",
                    label,
                    t.shape(),
                    rows,
                    n
                )));
            }
            t.validate_finite(label)
                .map_err(|_| self.err(format!("array `{}` contains non-finite values", label)))?;
        }
        if let Some(yaw) = &self.gt_yaw {
            if yaw.len() != n {
                return Err(self.err(format!("array `gt_yaw` has {} samples, expected {}", yaw.len(), n)));
            }
        }
        let mut dts: Vec<f64> = Vec::with_capacity(n - 1);
        for w in self.timestamps.windows(2) {
            let dt = w[1] - w[0];
            if dt <= 0.0 {
                return Err(self.err("timestamps are not strictly increasing"));
            }
            dts.push(dt);
        }
        let mut sorted = dts.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = sorted[sorted.len() / 2];
        for dt in &dts {
            if (dt - median).abs() > 0.01 * median {
                return Err(self.err(format!(
                    "sample interval {} deviates more than 1% from the nominal {}",
                    dt, median
                )));
            }
        }
        Ok(())
    }

    /// Ground-truth position at time `t`, linearly interpolated; linear
    /// extrapolation past the ends (used for at most one sample interval by
    /// the window targets).
    pub fn position_at(&self, t: f64) -> [f64; 2] {
        let ts = &self.timestamps;
        let n = ts.len();
        let seg = match ts.binary_search_by(|v| v.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(0) => 0,
            Err(i) if i >= n => n - 2,
            Err(i) => i - 1,
        };
        let (t0, t1) = (ts[seg], ts[seg + 1]);
        let w = (t - t0) / (t1 - t0);
        [
            self.gt_pos.at2(0, seg) + w * (self.gt_pos.at2(0, seg + 1) - self.gt_pos.at2(0, seg)),
            self.gt_pos.at2(1, seg) + w * (self.gt_pos.at2(1, seg + 1) - self.gt_pos.at2(1, seg)),
        ]
    }
}

/// One training/evaluation sample: a `[6, L]` window (gyro rows 0-2, accel
/// rows 3-5) and its mean-velocity target over `[t_start, t_end]`.
#[derive(Clone, Debug)]
pub struct WindowSample<T: Element> {
    pub imu: Tensor<T>,
    pub target: Tensor<T>,
    pub t_start: f64,
    pub t_end: f64,
}

impl<T: Element> WindowSample<T> {
    pub fn target_xy(&self) -> [f64; 2] {
        [self.target.data()[0].as_f64(), self.target.data()[1].as_f64()]
    }
}

/// Window collection with a guard flag so standardization cannot be applied
/// twice.
#[derive(Clone, Debug, Default)]
pub struct WindowSet<T: Element> {
    pub windows: Vec<WindowSample<T>>,
    pub normalized: bool,
}

impl<T: Element> WindowSet<T> {
    pub fn new(windows: Vec<WindowSample<T>>) -> Self {
        WindowSet {
            windows,
            normalized: false,
        }
    }
}

/// Slices `rec` into windows at offsets `0, stride, 2*stride, ...`.
///
/// Window k spans `[t_o, t_o + L*dt)` where `dt` is the window's mean sample
/// interval, so abutting windows (stride = L) tile the time axis exactly and
/// their velocity targets telescope.
pub fn make_windows<T: Element>(rec: &SequenceRecord, l: usize, stride: usize) -> Result<Vec<WindowSample<T>>> {
    let n = rec.len();
    if l < 2 {
        return Err(Error::invalid("make_windows", "window length must be >= 2"));
    }
    if stride == 0 {
        return Err(Error::invalid("make_windows", "stride must be >= 1"));
    }
    if l > n {
        return Err(Error::invalid(
            "make_windows",
            format!("window length {} exceeds sequence length {}", l, n),
        ));
    }
    let count = (n - l) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let o = k * stride;
        let t_start = rec.timestamps[o];
        let dt = (rec.timestamps[o + l - 1] - t_start) / (l - 1) as f64;
        let t_end = t_start + l as f64 * dt;
        let p0 = [rec.gt_pos.at2(0, o), rec.gt_pos.at2(1, o)];
        let p1 = rec.position_at(t_end);
        let inv = 1.0 / (t_end - t_start);
        let target = Tensor::from_f64s(vec![2], &[(p1[0] - p0[0]) * inv, (p1[1] - p0[1]) * inv])?;
        let mut imu = vec![T::zero(); 6 * l];
        for row in 0..3 {
            for j in 0..l {
                imu[row * l + j] = T::from_f64(rec.gyro.at2(row, o + j));
                imu[(row + 3) * l + j] = T::from_f64(rec.accel.at2(row, o + j));
            }
        }
        out.push(WindowSample {
            imu: Tensor::from_vec(vec![6, l], imu)?,
            target,
            t_start,
            t_end,
        });
    }
    Ok(out)
}

/// Per-channel standardization constants from a training window set.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn to_input_stats<T: Element>(&self) -> Result<InputStats<T>> {
        Ok(InputStats {
            mean: Tensor::from_f64s(vec![self.mean.len()], &self.mean)?,
            std: Tensor::from_f64s(vec![self.std.len()], &self.std)?,
        })
    }

    pub fn from_input_stats<T: Element>(stats: &InputStats<T>) -> Self {
        ChannelStats {
            mean: stats.mean.data().iter().map(|v| v.as_f64()).collect(),
            std: stats.std.data().iter().map(|v| v.as_f64()).collect(),
        }
    }
}

/// Population mean and standard deviation per channel over all windows.
pub fn compute_stats<T: Element>(windows: &[WindowSample<T>]) -> Result<ChannelStats> {
    if windows.is_empty() {
        return Err(Error::invalid("compute_stats", "no windows"));
    }
    let c = windows[0].imu.shape()[0];
    let mut sum = vec![0.0f64; c];
    let mut sumsq = vec![0.0f64; c];
    let mut count = 0usize;
    for w in windows {
        let l = w.imu.shape()[1];
        count += l;
        for ch in 0..c {
            for j in 0..l {
                let v = w.imu.data()[ch * l + j].as_f64();
                sum[ch] += v;
                sumsq[ch] += v * v;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| (sq / count as f64 - m * m).max(0.0).sqrt())
        .collect();
    for (ch, s) in std.iter().enumerate() {
        if *s == 0.0 {
            return Err(Error::invalid(
                "compute_stats",
                format!("channel {} has zero standard deviation", ch),
            ));
        }
    }
    Ok(ChannelStats { mean, std })
}

/// Standardizes every window in place. Refuses to run twice on the same set.
pub fn normalize<T: Element>(set: &mut WindowSet<T>, stats: &ChannelStats) -> Result<()> {
    if set.normalized {
        return Err(Error::invalid("normalize", "window set is already normalized"));
    }
    for s in &stats.std {
        if *s == 0.0 {
            return Err(Error::invalid("normalize", "zero-sigma channel"));
        }
    }
    for w in &mut set.windows {
        let c = w.imu.shape()[0];
        let l = w.imu.shape()[1];
        for ch in 0..c {
            let m = T::from_f64(stats.mean[ch]);
            let inv = T::from_f64(1.0 / stats.std[ch]);
            for v in &mut w.imu.data_mut()[ch * l..(ch + 1) * l] {
                *v = (*v - m) * inv;
            }
        }
    }
    set.normalized = true;
    Ok(())
}

// ── on-disk layout ──────────────────────────────────────────────────────

fn seq_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

pub fn save_sequence(root: impl AsRef<Path>, rec: &SequenceRecord) -> Result<()> {
    rec.validate()?;
    let dir = seq_dir(root.as_ref(), &rec.name);
    fs::create_dir_all(&dir)?;
    Tensor::<f64>::from_f64s(vec![rec.len()], &rec.timestamps)?.write_file(dir.join("time"))?;
    rec.gyro.write_file(dir.join("gyro"))?;
    rec.accel.write_file(dir.join("accel"))?;
    rec.gt_pos.write_file(dir.join("gt_pos"))?;
    if let Some(yaw) = &rec.gt_yaw {
        Tensor::<f64>::from_f64s(vec![yaw.len()], yaw)?.write_file(dir.join("gt_yaw"))?;
    }
    Ok(())
}

/// Writes all sequences and the manifest under `root`.
pub fn save_dataset(root: impl AsRef<Path>, recs: &[SequenceRecord]) -> Result<()> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    for rec in recs {
        save_sequence(root, rec)?;
    }
    let manifest: String = recs.iter().map(|r| format!("{}\n", r.name)).collect();
    fs::write(root.join("manifest.txt"), manifest)?;
    Ok(())
}

pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<SequenceRecord>> {
    let root = root.as_ref();
    let manifest = fs::read_to_string(root.join("manifest.txt")).map_err(|e| Error::Dataset {
        name: root.display().to_string(),
        detail: format!("cannot read manifest.txt: {}", e),
    })?;
    let mut out = Vec::new();
    for line in manifest.lines() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        out.push(load_sequence(root, name)?);
    }
    Ok(out)
}

pub fn load_sequence(root: impl AsRef<Path>, name: &str) -> Result<SequenceRecord> {
    let dir = seq_dir(root.as_ref(), name);
    let read = |file: &str| -> Result<Tensor<f64>> {
        Tensor::read_file(dir.join(file)).map_err(|e| Error::Dataset {
            name: name.to_string(),
            detail: format!("array `{}`: {}", file, e),
        })
    };
    let time = read("time")?;
    if time.shape().len() != 1 {
        return Err(Error::Dataset {
            name: name.to_string(),
            detail: format!("array `time` must be rank 1, got {:?}", time.shape()),
        });
    }
    let gt_yaw = if dir.join("gt_yaw").exists() {
        Some(read("gt_yaw")?.into_data())
    } else {
        None
    };
    let rec = SequenceRecord {
        name: name.to_string(),
        timestamps: time.into_data(),
        gyro: read("gyro")?,
        accel: read("accel")?,
        gt_pos: read("gt_pos")?,
        gt_yaw,
    };
    rec.validate()?;
    Ok(rec)
}
