//! Glue between checkpointed models, datasets, and trajectory metrics:
//! window a sequence at evaluation stride, predict per-window velocities,
//! dead-reckon from the ground-truth start, and score ATE/RTE.

use crate::data::{self, make_windows, ChannelStats, SequenceRecord, WindowSet};
use crate::error::{Error, Result};
use crate::eval::{self, ate, integrate_trajectory, rte, EvalReport, SequenceEval, Trajectory};
use crate::model::Model;
use crate::tensor::Element;

pub const RTE_INTERVAL_S: f64 = 60.0;

/// Ground-truth trajectory at the full sample rate.
pub fn gt_trajectory(rec: &SequenceRecord) -> Result<Trajectory> {
    Trajectory::new(
        rec.timestamps.clone(),
        (0..rec.len())
            .map(|i| [rec.gt_pos.at2(0, i), rec.gt_pos.at2(1, i)])
            .collect(),
    )
}

/// Per-window velocity predictions for one sequence at evaluation stride
/// (= window length). Returns `(t_start, t_end, velocity)` rows.
pub fn predict_windows<T: Element>(
    model: &Model<T>,
    rec: &SequenceRecord,
) -> Result<Vec<(f64, f64, [f64; 2])>> {
    let l = model.config.window_len;
    if l > rec.len() {
        return Err(Error::invalid(
            "predict",
            format!(
                "sequence `{}` has {} samples, shorter than the model window {}",
                rec.name,
                rec.len(),
                l
            ),
        ));
    }
    let mut set = WindowSet::new(make_windows::<T>(rec, l, l)?);
    if let Some(stats) = &model.input_stats {
        data::normalize(&mut set, &ChannelStats::from_input_stats(stats))?;
    }
    let imus: Vec<_> = set.windows.iter().map(|w| w.imu.clone()).collect();
    let preds = model.predict(&imus)?;
    Ok(set
        .windows
        .iter()
        .zip(preds)
        .map(|(w, p)| {
            let v = [p.data()[0].as_f64(), p.data()[1].as_f64()];
            (w.t_start, w.t_end, v)
        })
        .collect())
}

/// Dead-reckoned trajectory for one sequence, anchored at the ground-truth
/// start position.
pub fn predict_trajectory<T: Element>(model: &Model<T>, rec: &SequenceRecord) -> Result<Trajectory> {
    let rows = predict_windows(model, rec)?;
    let preds: Vec<(f64, [f64; 2])> = rows.iter().map(|&(t, _, v)| (t, v)).collect();
    let end_time = rows.last().map(|&(_, te, _)| te).unwrap();
    let p0 = [rec.gt_pos.at2(0, 0), rec.gt_pos.at2(1, 0)];
    integrate_trajectory(&preds, p0, end_time)
}

/// Evaluates every sequence; returns the report plus the trajectory pairs
/// for plotting.
pub fn eval_sequences<T: Element>(
    model: &Model<T>,
    recs: &[SequenceRecord],
) -> Result<(EvalReport, Vec<(String, Trajectory, Trajectory)>)> {
    if recs.is_empty() {
        return Err(Error::invalid("eval", "no sequences to evaluate"));
    }
    let mut rows = Vec::with_capacity(recs.len());
    let mut trajs = Vec::with_capacity(recs.len());
    for rec in recs {
        let gt = gt_trajectory(rec)?;
        let pred = predict_trajectory(model, rec)?;
        rows.push(SequenceEval {
            name: rec.name.clone(),
            ate: ate(&pred, &gt)?,
            rte: rte(&pred, &gt, RTE_INTERVAL_S)?,
            length: gt.length(),
        });
        trajs.push((rec.name.clone(), gt, pred));
    }
    let report = EvalReport::from_sequences(
        rows,
        model.param_count(),
        model.count_flops(model.config.window_len),
    )?;
    Ok((report, trajs))
}

/// Splits sequence indices into train/validation at the sequence level
/// (deterministic for a fixed seed); validation takes ~10%, at least one.
pub fn split_train_val(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::invalid("split", "need at least 2 sequences for a train/val split"));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64 * 0.1).round() as usize).clamp(1, n - 1);
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    Ok((train, val))
}

pub use eval::emit_report;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};
    use crate::synth::{synth_generate, Motion, SynthSpec};

    #[test]
    fn perfect_velocity_oracle_gives_near_zero_ate() {
        // Feed the ground-truth window velocities through the integration
        // path: reconstruction must track ground truth almost exactly.
        let spec = SynthSpec {
            motion: Motion::Circle,
            gyro_noise_std: 0.0,
            accel_noise_std: 0.0,
            ..Default::default()
        };
        let rec = synth_generate(&spec, 3, "c").unwrap();
        let ws = make_windows::<f64>(&rec, 50, 50).unwrap();
        let preds: Vec<(f64, [f64; 2])> = ws.iter().map(|w| (w.t_start, w.target_xy())).collect();
        let traj = integrate_trajectory(&preds, [rec.gt_pos.at2(0, 0), rec.gt_pos.at2(1, 0)], ws.last().unwrap().t_end)
            .unwrap();
        let gt = gt_trajectory(&rec).unwrap();
        // Exact at window boundaries; between boundaries the straight-line
        // segments cut the circle chords, so allow the chord sagitta.
        let e = ate(&traj, &gt).unwrap();
        assert!(e < 1e-2, "ate = {}", e);
        // And exactly zero at the boundaries themselves.
        for (k, w) in ws.iter().enumerate() {
            let p = traj.positions[k];
            let g = [rec.gt_pos.at2(0, k * 50), rec.gt_pos.at2(1, k * 50)];
            assert!((p[0] - g[0]).abs() < 1e-9 && (p[1] - g[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn eval_report_covers_every_sequence() {
        let cfg = ModelConfig {
            window_len: 32,
            stage_channels: [4, 4, 4, 4],
            blocks_per_stage: [1, 1, 1, 1],
            stage_strides: [1, 2, 2, 2],
            head_hidden: vec![8],
            ..Default::default()
        };
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let spec = SynthSpec {
            duration_s: 4.0,
            rate_hz: 50.0,
            ..Default::default()
        };
        let recs: Vec<_> = (0..3)
            .map(|k| synth_generate(&spec, k, &format!("s{}", k)).unwrap())
            .collect();
        let (report, trajs) = eval_sequences(&model, &recs).unwrap();
        assert_eq!(report.sequences.len(), 3);
        assert_eq!(trajs.len(), 3);
        assert!(report.mean_ate.is_finite());
        assert!(report.param_count > 0);
    }

    #[test]
    fn too_short_sequence_is_reported() {
        let cfg = ModelConfig {
            window_len: 6400,
            stage_channels: [4, 4, 4, 4],
            blocks_per_stage: [1, 1, 1, 1],
            ..Default::default()
        };
        let model = Model::<f32>::new(cfg, 1).unwrap();
        let rec = synth_generate(&SynthSpec::default(), 1, "short").unwrap();
        assert!(predict_windows(&model, &rec).is_err());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (tr, va) = split_train_val(20, 42).unwrap();
        let (tr2, va2) = split_train_val(20, 42).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert_eq!(tr.len() + va.len(), 20);
        assert_eq!(va.len(), 2);
        for v in &va {
            assert!(!tr.contains(v));
        }
    }
}
