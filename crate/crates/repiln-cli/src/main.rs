//! Command-line driver: synthesize datasets, train, fuse to deploy form,
//! evaluate, predict, and inspect checkpoints.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use repiln::checkpoint;
use repiln::data::{self, compute_stats, make_windows, WindowSet};
use repiln::error::Error;
use repiln::model::{Model, ModelConfig, ModelMode};
use repiln::pipeline;
use repiln::synth::{synth_generate, Motion, SynthSpec};
use repiln::train::{train, write_history, TrainConfig};

#[derive(Parser)]
#[command(name = "repiln", version, about = "Reparameterized inertial localization network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic IMU dataset in the neutral on-disk layout.
    Synth {
        /// Output dataset directory (created if absent; sequences append).
        #[arg(long)]
        out: PathBuf,
        /// Number of sequences to generate.
        #[arg(long, default_value_t = 8)]
        sequences: usize,
        /// Duration per sequence, seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// Sample rate, Hz.
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
        /// Motion pattern: straight, circle, or random-turn.
        #[arg(long, default_value = "straight")]
        motion: String,
        /// Forward speed, m/s.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Turn radius for circles, meters.
        #[arg(long, default_value_t = 2.0)]
        radius: f64,
        /// Gyroscope noise sigma, rad/s.
        #[arg(long, default_value_t = 0.02)]
        gyro_noise: f64,
        /// Accelerometer noise sigma, m/s^2.
        #[arg(long, default_value_t = 0.1)]
        accel_noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a dataset directory and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Optional key=value config file (model and training keys).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Per-epoch history file (default: `<out>.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fuse a train-form checkpoint into the single-path deploy form.
    Fuse {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and emit the report bundle.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict per-window velocities for one sequence directory.
    Predict {
        /// Sequence directory (containing `time`, `gyro`, `accel`, ...).
        #[arg(long)]
        sequence: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Velocity CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// Optional integrated-trajectory CSV.
        #[arg(long)]
        traj: Option<PathBuf>,
    },
    /// Print a checkpoint's mode, config, parameter count, and MAC count.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Divergence(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Synth {
            out,
            sequences,
            duration,
            rate,
            motion,
            speed,
            radius,
            gyro_noise,
            accel_noise,
            seed,
        } => cmd_synth(
            &out, sequences, duration, rate, &motion, speed, radius, gyro_noise, accel_noise, seed,
        ),
        Command::Train {
            data,
            out,
            config,
            history,
            seed,
        } => cmd_train(&data, &out, config.as_deref(), history.as_deref(), seed),
        Command::Fuse { input, out } => cmd_fuse(&input, &out),
        Command::Eval { data, ckpt, out } => cmd_eval(&data, &ckpt, &out),
        Command::Predict {
            sequence,
            ckpt,
            out,
            traj,
        } => cmd_predict(&sequence, &ckpt, &out, traj.as_deref()),
        Command::Info { ckpt } => cmd_info(&ckpt),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    out: &Path,
    sequences: usize,
    duration: f64,
    rate: f64,
    motion: &str,
    speed: f64,
    radius: f64,
    gyro_noise: f64,
    accel_noise: f64,
    seed: u64,
) -> Result<(), Error> {
    let motion = Motion::parse(motion)
        .ok_or_else(|| Error::invalid("synth", format!("unknown motion `{}`", motion)))?;
    let spec = SynthSpec {
        duration_s: duration,
        rate_hz: rate,
        motion,
        speed,
        radius,
        gyro_noise_std: gyro_noise,
        accel_noise_std: accel_noise,
        ..Default::default()
    };
    spec.validate()?;
    if sequences == 0 {
        return Err(Error::invalid("synth", "--sequences must be >= 1"));
    }
    println!(
        "synth: out={} sequences={} duration={}s rate={}Hz motion={} speed={} radius={} gyro_noise={} accel_noise={} seed={}",
        out.display(),
        sequences,
        duration,
        rate,
        motion.name(),
        speed,
        radius,
        gyro_noise,
        accel_noise,
        seed
    );

    // Merge with any existing manifest; duplicate names are an input error.
    let manifest_path = out.join("manifest.txt");
    let mut names: Vec<String> = if manifest_path.exists() {
        std::fs::read_to_string(&manifest_path)?
            .lines()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    } else {
        Vec::new()
    };
    std::fs::create_dir_all(out)?;
    for i in 0..sequences {
        let name = format!("{}_{:03}", motion.name(), i);
        if names.contains(&name) {
            return Err(Error::invalid(
                "synth",
                format!("sequence `{}` already exists in {}", name, out.display()),
            ));
        }
        let rec = synth_generate(&spec, seed.wrapping_add(i as u64), &name)?;
        data::save_sequence(out, &rec)?;
        names.push(name);
    }
    let manifest: String = names.iter().map(|n| format!("{}\n", n)).collect();
    std::fs::write(manifest_path, manifest)?;
    println!("synth: wrote {} sequences", sequences);
    Ok(())
}

fn load_configs(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig), Error> {
    let mut model_cfg = ModelConfig::default();
    let mut train_cfg = TrainConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        for (key, value) in repiln::model::parse_kv_lines(&text)? {
            if model_cfg.apply_kv(&key, &value)? || train_cfg.apply_kv(&key, &value)? {
                continue;
            }
            return Err(Error::invalid("config", format!("unknown key `{}`", key)));
        }
    }
    model_cfg.validate()?;
    train_cfg.validate()?;
    Ok((model_cfg, train_cfg))
}

fn cmd_train(
    data_dir: &Path,
    out: &Path,
    config: Option<&Path>,
    history: Option<&Path>,
    seed: u64,
) -> Result<(), Error> {
    let (model_cfg, mut train_cfg) = load_configs(config)?;
    train_cfg.seed = seed;
    println!("train: data={} out={} seed={}", data_dir.display(), out.display(), seed);
    print!("{}", model_cfg.to_kv_text());
    println!(
        "initial_lr={}\nmax_epochs={}\nlr_floor={}\nplateau_factor={}\nplateau_patience={}\nbatch_size={}\nwindow_stride={}",
        train_cfg.initial_lr,
        train_cfg.max_epochs,
        train_cfg.lr_floor,
        train_cfg.plateau_factor,
        train_cfg.plateau_patience,
        train_cfg.batch_size,
        train_cfg.window_stride
    );

    let recs = data::load_dataset(data_dir)?;
    let (train_ids, val_ids) = pipeline::split_train_val(recs.len(), seed)?;
    let slice = |ids: &[usize]| -> Result<Vec<_>, Error> {
        let mut ws = Vec::new();
        for &i in ids {
            ws.extend(make_windows::<f32>(&recs[i], model_cfg.window_len, train_cfg.window_stride)?);
        }
        Ok(ws)
    };
    let mut train_set = WindowSet::new(slice(&train_ids)?);
    let mut val_set = WindowSet::new(slice(&val_ids)?);
    println!(
        "train: {} train sequences ({} windows), {} val sequences ({} windows)",
        train_ids.len(),
        train_set.windows.len(),
        val_ids.len(),
        val_set.windows.len()
    );

    let stats = compute_stats(&train_set.windows)?;
    data::normalize(&mut train_set, &stats)?;
    data::normalize(&mut val_set, &stats)?;

    let mut model = Model::<f32>::new(model_cfg, seed)?;
    model.input_stats = Some(stats.to_input_stats()?);
    let outcome = train(&mut model, &train_set.windows, &val_set.windows, &train_cfg)?;

    checkpoint::save(&outcome.best, out)?;
    let history_path = history
        .map(PathBuf::from)
        .unwrap_or_else(|| out.with_extension("history.csv"));
    write_history(&history_path, &outcome.history)?;
    let last = outcome.history.last().expect("history non-empty");
    println!(
        "train: finished after {} epochs; best val loss {} at epoch {}",
        outcome.history.len(),
        outcome.history[outcome.best_epoch].val_loss,
        outcome.best_epoch
    );
    println!("train: final train loss {}, final val loss {}", last.train_loss, last.val_loss);
    println!("train: checkpoint {} history {}", out.display(), history_path.display());
    Ok(())
}

fn cmd_fuse(input: &Path, out: &Path) -> Result<(), Error> {
    let model = checkpoint::load_expect::<f32>(input, ModelMode::Train)?;
    println!("fuse: in={} out={}", input.display(), out.display());
    let fused = model.fuse()?;
    let before = model.param_count();
    let after = fused.param_count();
    let reduction = 100.0 * (before - after) as f64 / before as f64;
    checkpoint::save(&fused, out)?;
    println!(
        "fuse: parameters {} -> {} ({:.2}% reduction)",
        before, after, reduction
    );
    Ok(())
}

fn cmd_eval(data_dir: &Path, ckpt: &Path, out: &Path) -> Result<(), Error> {
    let model = checkpoint::load::<f32>(ckpt)?;
    println!(
        "eval: data={} ckpt={} ({}-form) out={}",
        data_dir.display(),
        ckpt.display(),
        model.mode.name(),
        out.display()
    );
    print!("{}", model.config.to_kv_text());
    let recs = data::load_dataset(data_dir)?;
    let (report, trajs) = pipeline::eval_sequences(&model, &recs)?;
    pipeline::emit_report(&report, &trajs, out)?;
    for s in &report.sequences {
        println!("eval: {} ate={:.4} m rte={:.4} m length={:.2} m", s.name, s.ate, s.rte, s.length);
    }
    println!(
        "eval: mean ate={:.4} m mean rte={:.4} m over {} sequences; params={} macs_per_window={}",
        report.mean_ate,
        report.mean_rte,
        report.sequences.len(),
        report.param_count,
        report.mac_count
    );
    Ok(())
}

fn cmd_predict(sequence: &Path, ckpt: &Path, out: &Path, traj: Option<&Path>) -> Result<(), Error> {
    let model = checkpoint::load::<f32>(ckpt)?;
    let name = sequence
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid("predict", "sequence path has no directory name"))?;
    let root = sequence.parent().unwrap_or_else(|| Path::new("."));
    println!(
        "predict: sequence={} ckpt={} ({}-form) out={}",
        sequence.display(),
        ckpt.display(),
        model.mode.name(),
        out.display()
    );
    let rec = data::load_sequence(root, name)?;
    let rows = pipeline::predict_windows(&model, &rec)?;
    let mut csv = String::from("t_start,t_end,vx,vy\n");
    for (t0, t1, v) in &rows {
        csv.push_str(&format!("{},{},{},{}\n", t0, t1, v[0], v[1]));
    }
    std::fs::write(out, csv)?;
    if let Some(traj_path) = traj {
        let trajectory = pipeline::predict_trajectory(&model, &rec)?;
        let mut csv = String::from("t,x,y\n");
        for (t, p) in trajectory.timestamps.iter().zip(&trajectory.positions) {
            csv.push_str(&format!("{},{},{}\n", t, p[0], p[1]));
        }
        std::fs::write(traj_path, csv)?;
    }
    println!("predict: wrote {} windows", rows.len());
    Ok(())
}

fn cmd_info(ckpt: &Path) -> Result<(), Error> {
    let model = checkpoint::load::<f32>(ckpt)?;
    println!("mode={}", model.mode.name());
    print!("{}", model.config.to_kv_text());
    println!("input_norm={}", model.input_stats.is_some());
    println!("parameters={}", model.param_count());
    println!(
        "macs_per_window={} (window_length={})",
        model.count_flops(model.config.window_len),
        model.config.window_len
    );
    Ok(())
}
