use super::TrainConfig;

/// Improvement margin: a validation loss counts as better only when it is
/// below the best seen minus this amount.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochDecision {
    pub improved: bool,
    /// The learning rate was multiplied by the factor after this epoch.
    pub lr_reduced: bool,
    /// Training stops after this epoch.
    pub stop: bool,
    /// Learning rate for the next epoch.
    pub next_lr: f64,
}

/// Reduce-on-plateau learning-rate schedule with a minimum-rate stop.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    max_epochs: usize,
    best: f64,
    stale: usize,
    epochs: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.initial_lr,
            factor: cfg.lr_factor,
            patience: cfg.plateau_patience,
            min_lr: cfg.min_lr,
            max_epochs: cfg.max_epochs,
            best: f64::INFINITY,
            stale: 0,
            epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records the validation loss of the epoch just finished.
    pub fn observe(&mut self, val_loss: f64) -> EpochDecision {
        self.epochs += 1;
        let improved = val_loss < self.best - IMPROVEMENT_TOL;
        if improved {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        let mut lr_reduced = false;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
            lr_reduced = true;
        }
        // Relative slack so that 1e-3 · 0.1⁴ = 1e-7 is not mistaken for < 1e-7.
        let below_min = self.lr < self.min_lr * (1.0 - 1e-9);
        let stop = below_min || self.epochs >= self.max_epochs;
        EpochDecision {
            improved,
            lr_reduced,
            stop,
            next_lr: self.lr,
        }
    }
}
