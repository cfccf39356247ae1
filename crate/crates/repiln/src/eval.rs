//! Trajectory reconstruction from predicted velocities and trajectory error
//! metrics (ATE over the whole sequence, RTE over fixed 60 s intervals),
//! plus report emission: per-sequence CSV, empirical CDFs, and SVG overlays.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Piecewise-linear planar trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub positions: Vec<[f64; 2]>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, positions: Vec<[f64; 2]>) -> Result<Self> {
        let t = Trajectory { timestamps, positions };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.timestamps.len() != self.positions.len() {
            return Err(Error::shape(
                "Trajectory",
                format!("{} timestamps vs {} positions", self.timestamps.len(), self.positions.len()),
            ));
        }
        if self.timestamps.len() < 2 {
            return Err(Error::invalid("Trajectory", "needs at least 2 points"));
        }
        if self.timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("Trajectory", "timestamps must be strictly increasing"));
        }
        Ok(())
    }

    pub fn start_time(&self) -> f64 {
        self.timestamps[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.timestamps.last().unwrap()
    }

    /// Linear interpolation at `t`; caller keeps `t` within range.
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
        let (p0, p1) = (self.positions[seg], self.positions[seg + 1]);
        [p0[0] + w * (p1[0] - p0[0]), p0[1] + w * (p1[1] - p0[1])]
    }

    /// Path length in meters.
    pub fn length(&self) -> f64 {
        self.positions
            .windows(2)
            .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
            .sum()
    }
}

/// Dead-reckons timestamped velocity predictions from `p0`: each prediction
/// `v_k` at `t_k` holds until the next prediction time, and the final one
/// until `end_time`, so the result has one more point than input.
pub fn integrate_trajectory(preds: &[(f64, [f64; 2])], p0: [f64; 2], end_time: f64) -> Result<Trajectory> {
    if preds.is_empty() {
        return Err(Error::invalid("integrate_trajectory", "no predictions"));
    }
    if preds.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::invalid("integrate_trajectory", "prediction timestamps must be increasing"));
    }
    if end_time <= preds.last().unwrap().0 {
        return Err(Error::invalid("integrate_trajectory", "end_time must exceed the last prediction time"));
    }
    let mut timestamps = Vec::with_capacity(preds.len() + 1);
    let mut positions = Vec::with_capacity(preds.len() + 1);
    let mut p = p0;
    for k in 0..preds.len() {
        let (t, v) = preds[k];
        timestamps.push(t);
        positions.push(p);
        let t_next = if k + 1 < preds.len() { preds[k + 1].0 } else { end_time };
        let dt = t_next - t;
        p = [p[0] + v[0] * dt, p[1] + v[1] * dt];
    }
    timestamps.push(end_time);
    positions.push(p);
    Trajectory::new(timestamps, positions)
}

/// Overlapping time range of two trajectories, or an error if empty.
fn overlap(a: &Trajectory, b: &Trajectory) -> Result<(f64, f64)> {
    let lo = a.start_time().max(b.start_time());
    let hi = a.end_time().min(b.end_time());
    if lo >= hi {
        return Err(Error::invalid("trajectory metrics", "trajectories have no time overlap"));
    }
    Ok((lo, hi))
}

/// Root-mean-square positional error over ground-truth sample times inside
/// the overlap; the prediction is resampled by linear interpolation. No
/// rotational or translational alignment is applied.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    let (lo, hi) = overlap(pred, gt)?;
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, &t) in gt.timestamps.iter().enumerate() {
        if t < lo || t > hi {
            continue;
        }
        let p = pred.position_at(t);
        let g = gt.positions[i];
        sum += (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("ate", "no ground-truth samples inside the overlap"));
    }
    Ok((sum / count as f64).sqrt())
}

/// Root-mean-square relative-displacement error over windows of `interval`
/// seconds, sliding at the ground-truth sample rate. When the overlap is
/// shorter than the interval, the full-span displacement error is scaled by
/// `interval / duration` instead.
pub fn rte(pred: &Trajectory, gt: &Trajectory, interval: f64) -> Result<f64> {
    pred.validate()?;
    gt.validate()?;
    if interval <= 0.0 {
        return Err(Error::invalid("rte", "interval must be positive"));
    }
    let (lo, hi) = overlap(pred, gt)?;
    let duration = hi - lo;
    let disp_err = |t0: f64, t1: f64| -> f64 {
        let dp = {
            let a = pred.position_at(t1);
            let b = pred.position_at(t0);
            [a[0] - b[0], a[1] - b[1]]
        };
        let dg = {
            let a = gt.position_at(t1);
            let b = gt.position_at(t0);
            [a[0] - b[0], a[1] - b[1]]
        };
        ((dp[0] - dg[0]).powi(2) + (dp[1] - dg[1]).powi(2)).sqrt()
    };
    if duration < interval {
        if gt.timestamps.iter().filter(|&&t| (lo..=hi).contains(&t)).count() < 2 {
            return Err(Error::invalid("rte", "overlap too short for even a scaled comparison"));
        }
        return Ok(disp_err(lo, hi) * interval / duration);
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for &t in &gt.timestamps {
        if t < lo || t + interval > hi {
            continue;
        }
        let e = disp_err(t, t + interval);
        sum += e * e;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("rte", "no interval fits the overlap"));
    }
    Ok((sum / count as f64).sqrt())
}

/// Per-sequence metric row.
#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub name: String,
    pub ate: f64,
    pub rte: f64,
    pub length: f64,
}

/// Evaluation bundle: rows, aggregates, CDF samples, and model size figures.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub sequences: Vec<SequenceEval>,
    pub mean_ate: f64,
    pub mean_rte: f64,
    pub cdf_ate: Vec<(f64, f64)>,
    pub cdf_rte: Vec<(f64, f64)>,
    pub param_count: usize,
    pub mac_count: u64,
}

impl EvalReport {
    pub fn from_sequences(sequences: Vec<SequenceEval>, param_count: usize, mac_count: u64) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::invalid("EvalReport", "no sequences"));
        }
        let n = sequences.len() as f64;
        let mean_ate = sequences.iter().map(|s| s.ate).sum::<f64>() / n;
        let mean_rte = sequences.iter().map(|s| s.rte).sum::<f64>() / n;
        let cdf_ate = empirical_cdf(sequences.iter().map(|s| s.ate).collect());
        let cdf_rte = empirical_cdf(sequences.iter().map(|s| s.rte).collect());
        Ok(EvalReport {
            sequences,
            mean_ate,
            mean_rte,
            cdf_ate,
            cdf_rte,
            param_count,
            mac_count,
        })
    }
}

/// `(sorted value, cumulative fraction)` pairs; fractions end at exactly 1.
pub fn empirical_cdf(mut values: Vec<f64>) -> Vec<(f64, f64)> {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, (i + 1) as f64 / n as f64))
        .collect()
}

/// Writes `metrics.csv`, `cdf_ate.csv`, `cdf_rte.csv`, and one SVG overlay
/// per `(name, ground truth, prediction)` triple.
pub fn emit_report(
    report: &EvalReport,
    trajectories: &[(String, Trajectory, Trajectory)],
    out_dir: impl AsRef<Path>,
) -> Result<()> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;

    let mut metrics = String::from("name,ate,rte,length\n");
    for s in &report.sequences {
        metrics.push_str(&format!("{},{},{},{}\n", s.name, s.ate, s.rte, s.length));
    }
    fs::write(out_dir.join("metrics.csv"), metrics)?;

    for (file, cdf) in [("cdf_ate.csv", &report.cdf_ate), ("cdf_rte.csv", &report.cdf_rte)] {
        let mut text = String::from("value,cumulative_fraction\n");
        for (v, f) in cdf {
            text.push_str(&format!("{},{}\n", v, f));
        }
        fs::write(out_dir.join(file), text)?;
    }

    for (name, gt, pred) in trajectories {
        let svg = trajectory_svg(gt, pred);
        fs::write(out_dir.join(format!("trajectory_{}.svg", name)), svg)?;
    }
    Ok(())
}

/// Static overlay: ground truth and prediction as the only two polylines,
/// with a frame and meter-labelled corner ticks.
pub fn trajectory_svg(gt: &Trajectory, pred: &Trajectory) -> String {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in gt.positions.iter().chain(&pred.positions) {
        min_x = min_x.min(p[0]);
        max_x = max_x.max(p[0]);
        min_y = min_y.min(p[1]);
        max_y = max_y.max(p[1]);
    }
    let pad = 0.05 * ((max_x - min_x).max(max_y - min_y)).max(1e-9);
    min_x -= pad;
    max_x += pad;
    min_y -= pad;
    max_y += pad;
    let size = 600.0;
    let span = (max_x - min_x).max(max_y - min_y);
    let sx = |x: f64| (x - min_x) / span * size + 40.0;
    let sy = |y: f64| size + 40.0 - (y - min_y) / span * size;
    let polyline = |t: &Trajectory, color: &str| {
        let pts: Vec<String> = t
            .positions
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p[0]), sy(p[1])))
            .collect();
        format!(
            "  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            color,
            pts.join(" ")
        )
    };
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{0}\" viewBox=\"0 0 {0} {0}\">\n",
        size + 80.0
    ));
    svg.push_str(&format!(
        "  <rect x=\"40\" y=\"40\" width=\"{0}\" height=\"{0}\" fill=\"white\" stroke=\"black\"/>\n",
        size
    ));
    svg.push_str(&format!(
        "  <text x=\"40\" y=\"30\" font-size=\"12\">x: {:.1} m to {:.1} m, y: {:.1} m to {:.1} m</text>\n",
        min_x, max_x, min_y, max_y
    ));
    svg.push_str(&polyline(gt, "black"));
    svg.push_str(&polyline(pred, "crimson"));
    svg.push_str(&format!(
        "  <text x=\"40\" y=\"{}\" font-size=\"12\" fill=\"black\">ground truth</text>\n",
        size + 60.0
    ));
    svg.push_str(&format!(
        "  <text x=\"160\" y=\"{}\" font-size=\"12\" fill=\"crimson\">prediction</text>\n",
        size + 60.0
    ));
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, dt: f64, v: [f64; 2], p0: [f64; 2]) -> Trajectory {
        Trajectory::new(
            (0..n).map(|i| i as f64 * dt).collect(),
            (0..n)
                .map(|i| {
                    let t = i as f64 * dt;
                    [p0[0] + v[0] * t, p0[1] + v[1] * t]
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn integration_of_constant_velocity() {
        let preds: Vec<(f64, [f64; 2])> = (0..10).map(|k| (k as f64, [1.0, 0.0])).collect();
        let traj = integrate_trajectory(&preds, [0.0, 0.0], 10.0).unwrap();
        assert_eq!(traj.positions.len(), 11);
        assert_eq!(*traj.positions.last().unwrap(), [10.0, 0.0]);

        let zero: Vec<(f64, [f64; 2])> = (0..5).map(|k| (k as f64, [0.0, 0.0])).collect();
        let traj0 = integrate_trajectory(&zero, [3.0, -1.0], 5.0).unwrap();
        for p in &traj0.positions {
            assert_eq!(*p, [3.0, -1.0]);
        }
    }

    #[test]
    fn integration_of_alternating_velocity_telescopes() {
        let preds: Vec<(f64, [f64; 2])> = (0..10)
            .map(|k| (k as f64, [if k % 2 == 0 { 1.0 } else { -1.0 }, 0.0]))
            .collect();
        let traj = integrate_trajectory(&preds, [0.0, 0.0], 10.0).unwrap();
        // 10 steps of alternating +-1: pairs cancel, end at origin.
        assert_eq!(*traj.positions.last().unwrap(), [0.0, 0.0]);
        let preds9: Vec<(f64, [f64; 2])> = preds[..9].to_vec();
        let traj9 = integrate_trajectory(&preds9, [0.0, 0.0], 9.0).unwrap();
        assert_eq!(*traj9.positions.last().unwrap(), [1.0, 0.0]);
    }

    #[test]
    fn unordered_predictions_rejected() {
        let preds = vec![(0.0, [1.0, 0.0]), (0.0, [1.0, 0.0])];
        assert!(integrate_trajectory(&preds, [0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn ate_zero_for_identical_and_offset_norm_for_shifted() {
        let gt = line(100, 0.1, [1.0, 0.5], [0.0, 0.0]);
        assert_eq!(ate(&gt, &gt).unwrap(), 0.0);
        let shifted = line(100, 0.1, [1.0, 0.5], [3.0, 4.0]);
        let e = ate(&shifted, &gt).unwrap();
        assert!((e - 5.0).abs() < 1e-12, "{}", e);
    }

    #[test]
    fn ate_linear_drift_closed_form() {
        // Drift grows linearly 0 -> 1 m in x over M uniform samples.
        let m = 101;
        let gt = line(m, 0.1, [0.0, 0.0], [0.0, 0.0]);
        let pred = Trajectory::new(
            gt.timestamps.clone(),
            (0..m).map(|i| [i as f64 / (m - 1) as f64, 0.0]).collect(),
        )
        .unwrap();
        let expect = ((0..m).map(|k| (k as f64 / (m - 1) as f64).powi(2)).sum::<f64>() / m as f64).sqrt();
        let got = ate(&pred, &gt).unwrap();
        assert!((got - expect).abs() < 1e-12, "{} vs {}", got, expect);
    }

    #[test]
    fn rte_offset_cancels_and_drift_scales() {
        let gt = line(2000, 0.1, [1.0, 0.0], [0.0, 0.0]);
        let offset = line(2000, 0.1, [1.0, 0.0], [5.0, -2.0]);
        assert!(rte(&offset, &gt, 60.0).unwrap() < 1e-12);

        // Constant extra velocity of 0.01 m/s over 60 s windows -> 0.6 m.
        let drift = line(2000, 0.1, [1.01, 0.0], [0.0, 0.0]);
        let e = rte(&drift, &gt, 60.0).unwrap();
        assert!((e - 0.6).abs() < 1e-9, "{}", e);
    }

    #[test]
    fn rte_short_sequence_scales_by_interval_over_duration() {
        // 10 s of data, drift 0.01 m/s: full-span error 0.1 m, scaled by
        // 60/10 -> 0.6 m.
        let gt = line(101, 0.1, [1.0, 0.0], [0.0, 0.0]);
        let drift = line(101, 0.1, [1.01, 0.0], [0.0, 0.0]);
        let e = rte(&drift, &gt, 60.0).unwrap();
        assert!((e - 0.6).abs() < 1e-9, "{}", e);
    }

    #[test]
    fn cdf_is_nondecreasing_and_ends_at_one() {
        let cdf = empirical_cdf(vec![3.0, 1.0, 2.0]);
        assert_eq!(cdf.len(), 3);
        assert_eq!(cdf[0], (1.0, 1.0 / 3.0));
        assert_eq!(cdf[1], (2.0, 2.0 / 3.0));
        assert_eq!(cdf[2], (3.0, 1.0));
    }

    #[test]
    fn report_files_and_svg_polylines() {
        let dir = tempfile::tempdir().unwrap();
        let gt = line(50, 0.1, [1.0, 0.0], [0.0, 0.0]);
        let pred = line(50, 0.1, [1.0, 0.1], [0.0, 0.0]);
        let rows = vec![SequenceEval {
            name: "seq0".into(),
            ate: ate(&pred, &gt).unwrap(),
            rte: rte(&pred, &gt, 60.0).unwrap(),
            length: gt.length(),
        }];
        let report = EvalReport::from_sequences(rows, 1234, 5678).unwrap();
        emit_report(&report, &[("seq0".into(), gt, pred)], dir.path()).unwrap();

        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 2); // header + one row
        assert!(metrics.starts_with("name,ate,rte,length\n"));

        let svg = std::fs::read_to_string(dir.path().join("trajectory_seq0.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);

        let cdf = std::fs::read_to_string(dir.path().join("cdf_ate.csv")).unwrap();
        assert!(cdf.lines().count() >= 2);
    }

    #[test]
    fn brute_force_parity_on_random_trajectories() {
        // Independent double-loop oracles.
        fn ate_oracle(pred: &Trajectory, gt: &Trajectory) -> f64 {
            let lo = pred.start_time().max(gt.start_time());
            let hi = pred.end_time().min(gt.end_time());
            let mut sum = 0.0;
            let mut count = 0;
            for i in 0..gt.timestamps.len() {
                let t = gt.timestamps[i];
                if t < lo || t > hi {
                    continue;
                }
                // linear interpolation by scanning segments
                let mut p = pred.positions[0];
                for s in 0..pred.timestamps.len() - 1 {
                    if t >= pred.timestamps[s] && t <= pred.timestamps[s + 1] {
                        let w = (t - pred.timestamps[s]) / (pred.timestamps[s + 1] - pred.timestamps[s]);
                        p = [
                            pred.positions[s][0] + w * (pred.positions[s + 1][0] - pred.positions[s][0]),
                            pred.positions[s][1] + w * (pred.positions[s + 1][1] - pred.positions[s][1]),
                        ];
                        break;
                    }
                }
                sum += (p[0] - gt.positions[i][0]).powi(2) + (p[1] - gt.positions[i][1]).powi(2);
                count += 1;
            }
            (sum / count as f64).sqrt()
        }
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let m = 40 + rng.gen_range(0..200);
            let dt = 0.05 + rng.gen::<f64>() * 0.1;
            let mut gt_pos = vec![[0.0f64; 2]];
            let mut pr_pos = vec![[0.0f64; 2]];
            for _ in 1..m {
                let last_g = *gt_pos.last().unwrap();
                let last_p = *pr_pos.last().unwrap();
                gt_pos.push([last_g[0] + rng.gen::<f64>() - 0.5, last_g[1] + rng.gen::<f64>() - 0.5]);
                pr_pos.push([last_p[0] + rng.gen::<f64>() - 0.5, last_p[1] + rng.gen::<f64>() - 0.5]);
            }
            let ts: Vec<f64> = (0..m).map(|i| i as f64 * dt).collect();
            let gt = Trajectory::new(ts.clone(), gt_pos).unwrap();
            let pred = Trajectory::new(ts, pr_pos).unwrap();
            let a = ate(&pred, &gt).unwrap();
            let b = ate_oracle(&pred, &gt);
            assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }
    }
}
