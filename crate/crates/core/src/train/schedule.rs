use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning rate as a function of the (0-based, global) epoch index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Fixed,
    /// Divides the rate by `factor` once each milestone epoch is reached.
    StepDecay { milestones: Vec<usize>, factor: f64 },
}

impl Schedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Self::StepDecay { milestones, factor } = self {
            if milestones.windows(2).any(|w| w[1] <= w[0]) {
                v.push(format!(
                    "schedule.milestones must be strictly increasing, got {milestones:?}"
                ));
            }
            if !(*factor > 0.0 && factor.is_finite()) {
                v.push(format!("schedule.factor must be positive, got {factor}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            Self::Fixed => base,
            Self::StepDecay { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base / factor.powi(passed as i32)
            }
        }
    }
}
