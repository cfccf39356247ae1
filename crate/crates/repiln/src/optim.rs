//! Adam with bias correction, and reduce-on-plateau learning-rate decay.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-parameter first/second moment estimates plus the step counter.
/// Parameter order is fixed by the model's traversal; moments are allocated
/// on first use.
pub struct AdamState<T: Element> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Starts a new optimizer step; call once before the per-parameter
    /// updates of that step.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Applies the bias-corrected update to one parameter, reading its
    /// stored gradient. `idx` is the parameter's position in traversal order.
    pub fn update(&mut self, idx: usize, param: &mut Tensor<T>) -> Result<()> {
        let n = param.numel();
        while self.m.len() <= idx {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        if self.m[idx].is_empty() {
            self.m[idx] = vec![T::zero(); n];
            self.v[idx] = vec![T::zero(); n];
        }
        if self.m[idx].len() != n {
            return Err(Error::shape(
                "adam_step",
                format!("parameter {} changed size: {} vs {}", idx, self.m[idx].len(), n),
            ));
        }
        let Some(grad) = param.grad().map(|g| g.to_vec()) else {
            return Ok(()); // no gradient recorded: parameter untouched
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", idx)));
        }
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let m = &mut self.m[idx];
        let v = &mut self.v[idx];
        for ((p, &g), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

/// Reduce-on-plateau schedule: after `patience` consecutive epochs without a
/// validation improvement the rate is multiplied by `factor`; a decay that
/// would land below `floor` stops training instead.
pub struct PlateauScheduler {
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    since_best: usize,
    decays: i32,
    stopped: bool,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, floor: f64) -> Self {
        PlateauScheduler {
            initial_lr,
            factor,
            patience,
            floor,
            best: f64::INFINITY,
            since_best: 0,
            decays: 0,
            stopped: false,
        }
    }

    /// Rate for the next epoch; recomputed from the initial rate so repeated
    /// decays carry no accumulated rounding.
    pub fn lr(&self) -> f64 {
        self.initial_lr * self.factor.powi(self.decays)
    }

    pub fn stopped(&self) -> bool {
        self.stopped
    }

    /// Feeds one epoch's validation loss. Returns false once training must
    /// stop (the next decay would drop below the floor).
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.since_best = 0;
            return true;
        }
        self.since_best += 1;
        if self.since_best >= self.patience.max(1) {
            self.since_best = 0;
            let next = self.initial_lr * self.factor.powi(self.decays + 1);
            if next < self.floor {
                self.stopped = true;
                return false;
            }
            self.decays += 1;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut adam = AdamState::<f64>::new(0.1);
        let mut p = Tensor::from_f64s(vec![2], &[1.0, -2.0]).unwrap();
        p.set_grad(Some(vec![0.0, 0.0]));
        adam.begin_step();
        adam.update(0, &mut p).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // w=0, g=1, lr=0.1: bias correction gives m_hat=v_hat=1,
        // so w -> -0.1 / (1 + 1e-8).
        let mut adam = AdamState::<f64>::new(0.1);
        let mut p = Tensor::from_f64s(vec![1], &[0.0]).unwrap();
        p.set_grad(Some(vec![1.0]));
        adam.begin_step();
        adam.update(0, &mut p).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - expect).abs() < 1e-15, "{}", p.data()[0]);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut adam = AdamState::<f32>::new(0.01);
            let mut p = Tensor::<f32>::from_f64s(vec![3], &[0.5, -0.5, 1.0]).unwrap();
            for step in 0..5 {
                let g: Vec<f32> = p.data().iter().map(|&x| 2.0 * x + step as f32 * 0.1).collect();
                p.set_grad(Some(g));
                adam.begin_step();
                adam.update(0, &mut p).unwrap();
            }
            p.data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_is_error() {
        let mut adam = AdamState::<f64>::new(0.1);
        let mut p = Tensor::from_f64s(vec![1], &[0.0]).unwrap();
        p.set_grad(Some(vec![f64::NAN]));
        adam.begin_step();
        assert!(adam.update(0, &mut p).is_err());
    }

    #[test]
    fn plateau_sequence_decays_then_stops() {
        // 1e-4 -> 1e-5 -> 1e-6 -> stop, with patience 0 (every miss decays).
        let mut s = PlateauScheduler::new(1e-4, 0.1, 0, 1e-6);
        assert!(s.observe(1.0)); // improvement (from +inf)
        assert_eq!(s.lr(), 1e-4);
        assert!(s.observe(1.0)); // miss -> decay
        assert_eq!(s.lr(), 1e-5);
        assert!(s.observe(1.0));
        assert!((s.lr() - 1e-6).abs() < 1e-18, "lr = {}", s.lr());
        assert!(s.lr() >= 1e-6);
        assert!(!s.observe(1.0)); // next decay would cross the floor
        assert!(s.stopped());
    }

    #[test]
    fn patience_counts_consecutive_misses() {
        let mut s = PlateauScheduler::new(1e-3, 0.1, 2, 1e-9);
        assert!(s.observe(1.0));
        assert!(s.observe(1.0)); // miss 1
        assert_eq!(s.lr(), 1e-3);
        assert!(s.observe(0.5)); // improvement resets
        assert!(s.observe(0.6)); // miss 1
        assert!(s.observe(0.6)); // miss 2 -> decay
        assert!((s.lr() - 1e-4).abs() < 1e-19);
    }
}
