use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce-on-plateau learning rate schedule.
///
/// A loss counts as an improvement when it is below `best · (1 − rel_tol)`.
/// After `patience` epochs in a row without one, the rate is multiplied by
/// `factor` (never below `min_lr`) and the counter restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub rel_tol: f64,
    #[serde(skip)]
    best: Option<f64>,
    #[serde(skip)]
    wait: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.5,
            min_lr: 1e-6,
            rel_tol: 1e-3,
            best: None,
            wait: 0,
        }
    }
}

impl PlateauSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) || self.min_lr < 0.0 || self.rel_tol < 0.0 || self.patience == 0 {
            return Err(Error::invalid("PlateauSchedule", format!("invalid settings {self:?}")));
        }
        Ok(())
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Records an epoch loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64, lr: f64) -> f64 {
        let improved = match self.best {
            None => true,
            Some(best) => loss < best - self.rel_tol * best.abs(),
        };
        if improved {
            self.best = Some(loss);
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            return (lr * self.factor).max(self.min_lr).min(lr);
        }
        lr
    }
}
