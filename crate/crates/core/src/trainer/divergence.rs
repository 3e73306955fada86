use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aborts a run once the loss has stayed above `factor` times its first
/// value for `window` consecutive steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceMonitor {
    factor: f32,
    window: usize,
    initial: Option<f32>,
    run: usize,
}

impl DivergenceMonitor {
    pub fn new(factor: f32, window: usize) -> Self {
        Self {
            factor,
            window: window.max(1),
            initial: None,
            run: 0,
        }
    }

    pub fn initial(&self) -> Option<f32> {
        self.initial
    }

    pub fn observe(&mut self, step: u64, loss: f32) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "training loss",
                context: format!("step {step}"),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            self.run += 1;
            if self.run >= self.window {
                return Err(Error::Divergence(format!(
                    "loss {loss} at step {step} has exceeded {}x the initial loss {initial} for {} consecutive steps",
                    self.factor, self.run
                )));
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}
