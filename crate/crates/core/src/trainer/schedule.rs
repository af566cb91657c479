//! Plateau learning-rate decay.

/// LR never decays below this.
pub const LR_FLOOR: f64 = 1e-7;

/// Epochs since the last strict improvement of the minimum; the whole
/// history length if nothing ever beat the first value.
fn epochs_since_best(history: &[f64]) -> usize {
    let mut best = f64::INFINITY;
    let mut last_improvement = None;
    for (i, &v) in history.iter().enumerate() {
        if v < best {
            if i > 0 {
                last_improvement = Some(i);
            }
            best = v;
        }
    }
    match last_improvement {
        Some(i) => history.len() - 1 - i,
        None => history.len(),
    }
}

/// `current_lr / 10` once the best validation value is `patience` or more
/// epochs old, else `current_lr`. Lower is better in `history`.
pub fn lr_plateau_step(history: &[f64], current_lr: f64, patience: usize) -> f64 {
    let patience = patience.max(1);
    if epochs_since_best(history) >= patience {
        (current_lr / 10.0).max(LR_FLOOR)
    } else {
        current_lr
    }
}

/// Stateful form of [`lr_plateau_step`] that restarts the count after every
/// decay, so one plateau decays once per `patience` epochs.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, patience: usize) -> Self {
        Self {
            lr,
            patience: patience.max(1),
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's validation value and return the LR for the next
    /// epoch.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if self.best.is_infinite() {
            self.best = metric;
            self.stale = 1;
        } else if metric < self.best {
            self.best = metric;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        if self.stale >= self.patience {
            self.lr = (self.lr / 10.0).max(LR_FLOOR);
            self.stale = 0;
        }
        self.lr
    }
}
