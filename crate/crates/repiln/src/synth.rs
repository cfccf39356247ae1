//! Synthetic planar strapdown IMU generator.
//!
//! Trajectories are constant-speed with piecewise-constant yaw rate, so
//! heading and position have closed forms and the ground truth is exact
//! before noise. Body-frame measurements follow the planar strapdown model:
//! gyro z is the yaw rate, accel is the world acceleration rotated into the
//! body frame plus gravity on the body z axis, then seeded Gaussian noise
//! and constant biases are added.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::SequenceRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GRAVITY: f64 = 9.81;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Straight,
    Circle,
    RandomTurn,
}

impl Motion {
    pub fn name(self) -> &'static str {
        match self {
            Motion::Straight => "straight",
            Motion::Circle => "circle",
            Motion::RandomTurn => "random-turn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "straight" => Some(Motion::Straight),
            "circle" => Some(Motion::Circle),
            "random-turn" => Some(Motion::RandomTurn),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub duration_s: f64,
    pub rate_hz: f64,
    pub motion: Motion,
    /// Constant forward speed, m/s.
    pub speed: f64,
    /// Circle radius, meters (counter-clockwise turn).
    pub radius: f64,
    pub gyro_noise_std: f64,
    pub accel_noise_std: f64,
    pub gyro_bias: [f64; 3],
    pub accel_bias: [f64; 3],
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            duration_s: 10.0,
            rate_hz: 200.0,
            motion: Motion::Straight,
            speed: 1.0,
            radius: 2.0,
            gyro_noise_std: 0.02,
            accel_noise_std: 0.1,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration_s <= 0.0 || self.rate_hz <= 0.0 {
            return Err(Error::invalid("synth", "duration and rate must be positive"));
        }
        if self.speed < 0.0 {
            return Err(Error::invalid("synth", "speed must be non-negative"));
        }
        if self.motion == Motion::Circle && self.radius <= 0.0 {
            return Err(Error::invalid("synth", "circle radius must be positive"));
        }
        if self.gyro_noise_std < 0.0 || self.accel_noise_std < 0.0 {
            return Err(Error::invalid("synth", "noise sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Heading/position state advanced segment by segment in closed form.
struct TurnState {
    yaw: f64,
    pos: [f64; 2],
}

impl TurnState {
    fn advance(&self, speed: f64, omega: f64, dt: f64) -> TurnState {
        if omega.abs() < 1e-12 {
            TurnState {
                yaw: self.yaw,
                pos: [
                    self.pos[0] + speed * dt * self.yaw.cos(),
                    self.pos[1] + speed * dt * self.yaw.sin(),
                ],
            }
        } else {
            let yaw1 = self.yaw + omega * dt;
            let r = speed / omega;
            TurnState {
                yaw: yaw1,
                pos: [
                    self.pos[0] + r * (yaw1.sin() - self.yaw.sin()),
                    self.pos[1] - r * (yaw1.cos() - self.yaw.cos()),
                ],
            }
        }
    }
}

/// Length of a yaw-rate segment for the random-turn motion.
const TURN_SEGMENT_S: f64 = 2.0;
const TURN_RATE_MAX: f64 = 0.6;

/// Generates one sequence. Same `(spec, seed)` always yields bit-identical
/// records.
pub fn synth_generate(spec: &SynthSpec, seed: u64, name: &str) -> Result<SequenceRecord> {
    spec.validate()?;
    let n = (spec.duration_s * spec.rate_hz).round() as usize + 1;
    let dt = 1.0 / spec.rate_hz;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Yaw-rate schedule as (last sample index of the segment, omega).
    // Boundaries snap to sample indices so the rate change happens exactly at
    // a sample; the boundary sample reports the mid-point rate, which keeps
    // trapezoidal reconstruction of the data consistent across the jump.
    let schedule: Vec<(usize, f64)> = match spec.motion {
        Motion::Straight => vec![(usize::MAX, 0.0)],
        Motion::Circle => vec![(usize::MAX, spec.speed / spec.radius)],
        Motion::RandomTurn => {
            let mut segs = Vec::new();
            let mut k = 1usize;
            loop {
                let omega = (rand::Rng::gen::<f64>(&mut rng) * 2.0 - 1.0) * TURN_RATE_MAX;
                let end = (k as f64 * TURN_SEGMENT_S * spec.rate_hz).round() as usize;
                if end >= n - 1 {
                    segs.push((usize::MAX, omega));
                    break;
                }
                segs.push((end, omega));
                k += 1;
            }
            segs
        }
    };

    let mut timestamps = Vec::with_capacity(n);
    let mut yaw = Vec::with_capacity(n);
    let mut omega_meas = Vec::with_capacity(n);
    let mut pos = vec![0.0f64; 2 * n];

    let mut state = TurnState { yaw: 0.0, pos: [0.0, 0.0] };
    let mut seg = 0usize;
    let mut seg_start_t = 0.0f64;
    for i in 0..n {
        let t = i as f64 * dt;
        while i > schedule[seg].0 {
            let boundary_t = schedule[seg].0 as f64 * dt;
            state = state.advance(spec.speed, schedule[seg].1, boundary_t - seg_start_t);
            seg_start_t = boundary_t;
            seg += 1;
        }
        let omega = schedule[seg].1;
        let s = state.advance(spec.speed, omega, t - seg_start_t);
        timestamps.push(t);
        yaw.push(s.yaw);
        // Mid-point rate exactly on a boundary sample.
        omega_meas.push(if i == schedule[seg].0 {
            0.5 * (omega + schedule[seg + 1].1)
        } else {
            omega
        });
        pos[i] = s.pos[0];
        pos[n + i] = s.pos[1];
    }

    // Measurements: exact kinematics + bias + seeded Gaussian noise, drawn
    // gyro xyz then accel xyz per sample.
    let gyro_noise = Normal::new(0.0, spec.gyro_noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid("synth", e.to_string()))?;
    let accel_noise = Normal::new(0.0, spec.accel_noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid("synth", e.to_string()))?;
    let mut gyro = vec![0.0f64; 3 * n];
    let mut accel = vec![0.0f64; 3 * n];
    for i in 0..n {
        let gn: [f64; 3] = std::array::from_fn(|_| {
            if spec.gyro_noise_std > 0.0 {
                gyro_noise.sample(&mut rng)
            } else {
                0.0
            }
        });
        let an: [f64; 3] = std::array::from_fn(|_| {
            if spec.accel_noise_std > 0.0 {
                accel_noise.sample(&mut rng)
            } else {
                0.0
            }
        });
        gyro[i] = spec.gyro_bias[0] + gn[0];
        gyro[n + i] = spec.gyro_bias[1] + gn[1];
        gyro[2 * n + i] = omega_meas[i] + spec.gyro_bias[2] + gn[2];
        // Body-frame planar acceleration of a constant-speed turn is purely
        // centripetal: (0, v * omega).
        accel[i] = spec.accel_bias[0] + an[0];
        accel[n + i] = spec.speed * omega_meas[i] + spec.accel_bias[1] + an[1];
        accel[2 * n + i] = GRAVITY + spec.accel_bias[2] + an[2];
    }

    let rec = SequenceRecord {
        name: name.to_string(),
        timestamps,
        gyro: Tensor::from_f64s(vec![3, n], &gyro)?,
        accel: Tensor::from_f64s(vec![3, n], &accel)?,
        gt_pos: Tensor::from_f64s(vec![2, n], &pos)?,
        gt_yaw: Some(yaw),
    };
    rec.validate()?;
    Ok(rec)
}
