//! Optimizers and learning-rate schedules for the bilevel search and for
//! retraining derived architectures.

use crate::autodiff::Param;
use crate::layers::ParamKind;

/// Momentum SGD: v <- m*v + (g + wd*p); p <- p - lr*v. Weight decay is
/// skipped for biases and norm scale/shift.
pub struct SgdMomentum {
    params: Vec<(ParamKind, Param)>,
    velocity: Vec<Vec<f64>>,
    momentum: f64,
    weight_decay: f64,
}

impl SgdMomentum {
    pub fn new(params: Vec<(ParamKind, Param)>, momentum: f64, weight_decay: f64) -> SgdMomentum {
        let velocity = params.iter().map(|(_, p)| vec![0.0; p.value().data.len()]).collect();
        SgdMomentum { params, velocity, momentum, weight_decay }
    }

    pub fn step(&mut self, lr: f64) {
        for ((kind, p), v) in self.params.iter().zip(&mut self.velocity) {
            let grad = p.grad_or_zeros();
            let wd = if *kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let mut t = p.value_mut();
            for i in 0..t.data.len() {
                let g = grad[i] + wd * t.data[i];
                v[i] = self.momentum * v[i] + g;
                t.data[i] -= lr * v[i];
            }
        }
    }
}

/// Adam with bias correction and classic L2 decay added to the gradient.
pub struct Adam {
    params: Vec<(ParamKind, Param)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    pub fn new(params: Vec<(ParamKind, Param)>, beta1: f64, beta2: f64, weight_decay: f64) -> Adam {
        let m = params.iter().map(|(_, p)| vec![0.0; p.value().data.len()]).collect();
        let v = params.iter().map(|(_, p)| vec![0.0; p.value().data.len()]).collect();
        Adam { params, m, v, t: 0, beta1, beta2, eps: 1e-8, weight_decay }
    }

    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((kind, p), m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad_or_zeros();
            let wd = if *kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            let mut t = p.value_mut();
            for i in 0..t.data.len() {
                let g = grad[i] + wd * t.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                t.data[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Half-cosine annealing without restart: lr0 at step 0, zero at the end.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos())
}

/// What [`PlateauSchedule::observe`] decided for this epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauDecision {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Halve the learning rate when validation loss stops decreasing for
/// `patience` epochs; stop after two halvings without any improvement
/// in between.
pub struct PlateauSchedule {
    pub lr: f64,
    floor: f64,
    patience: usize,
    best: f64,
    stale: usize,
    halvings_without_improvement: usize,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, patience: usize, floor: f64) -> PlateauSchedule {
        PlateauSchedule {
            lr: lr0,
            floor,
            patience,
            best: f64::INFINITY,
            stale: 0,
            halvings_without_improvement: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> PlateauDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            self.halvings_without_improvement = 0;
            return PlateauDecision { improved: true, halved: false, stop: false };
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.stale = 0;
            self.lr = (self.lr / 2.0).max(self.floor);
            self.halvings_without_improvement += 1;
            let stop = self.halvings_without_improvement >= 2;
            return PlateauDecision { improved: false, halved: true, stop };
        }
        PlateauDecision { improved: false, halved: false, stop: false }
    }
}
