//! Plateau learning-rate decay and early stopping.

use serde::{Deserialize, Serialize};

/// Result of feeding one epoch's validation loss to a [`Schedule`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

/// Tracks the best validation loss and two plateau counters.
///
/// The decay counter resets after each decay, so a long plateau decays the
/// rate every `lr_patience` epochs. The stop counter only resets on
/// improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub decay_factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub min_epochs: usize,
    pub epoch: usize,
    pub best: f64,
    pub best_epoch: usize,
    since_decay: usize,
    since_best: usize,
}

impl Schedule {
    pub fn new(lr: f64, decay_factor: f64, lr_patience: usize, stop_patience: usize, min_epochs: usize) -> Self {
        Self {
            lr,
            decay_factor,
            lr_patience,
            stop_patience,
            min_epochs,
            epoch: 0,
            best: f64::INFINITY,
            best_epoch: 0,
            since_decay: 0,
            since_best: 0,
        }
    }

    /// Records the validation loss of the epoch that just finished.
    pub fn observe(&mut self, val_loss: f64) -> Step {
        self.epoch += 1;
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.best_epoch = self.epoch;
            self.since_decay = 0;
            self.since_best = 0;
        } else {
            self.since_decay += 1;
            self.since_best += 1;
        }
        let stop = self.epoch >= self.min_epochs && self.since_best >= self.stop_patience;
        let decayed = !stop && self.since_decay >= self.lr_patience;
        if decayed {
            self.lr *= self.decay_factor;
            self.since_decay = 0;
        }
        Step {
            improved,
            decayed,
            stop,
        }
    }

    pub fn epochs_since_best(&self) -> usize {
        self.since_best
    }
}
