//! Row availability processes for the evolving-KB simulation.

use crate::{CoreError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Hourly check-in intensities for each day of the week (7×24). Availability
/// under the check-in process is inversely related to intensity: busy hours
/// keep rows out of the snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckinProfile {
    pub intensity: Vec<Vec<f64>>,
}

impl CheckinProfile {
    pub fn validate(&self) -> Result<()> {
        if self.intensity.len() != 7 || self.intensity.iter().any(|d| d.len() != 24) {
            return Err(CoreError::Simulation(
                "check-in profile must be 7 days x 24 hours".into(),
            ));
        }
        if self
            .intensity
            .iter()
            .flatten()
            .any(|&x| !x.is_finite() || x < 0.0)
        {
            return Err(CoreError::Simulation(
                "check-in intensities must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn max_intensity(&self) -> f64 {
        self.intensity
            .iter()
            .flatten()
            .cloned()
            .fold(0.0, f64::max)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(format!("reading profile {}", path.display()), e))?;
        let p: CheckinProfile = serde_json::from_str(&text)
            .map_err(|e| CoreError::json(format!("parsing profile {}", path.display()), e))?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProcessKind {
    /// Availability probability `1 - scale * I(h,dow) / max(I)`, clamped to
    /// `[0, 1]`. `scale` is the inconsistency lever used by the sweep.
    CheckinWeighted {
        profile: CheckinProfile,
        #[serde(default = "default_scale")]
        scale: f64,
    },
    /// Per-tick Bernoulli availability with success probability `p`.
    Bernoulli { p: f64 },
    /// Rows of this domain are always available.
    AlwaysOn,
}

fn default_scale() -> f64 {
    1.0
}

/// Availability process for one domain: the availability law plus the
/// day-long maintenance and permanent closure events.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AvailabilityProcess {
    #[serde(flatten)]
    pub kind: ProcessKind,
    #[serde(default)]
    pub maintenance_prob: f64,
    #[serde(default)]
    pub closure_prob: f64,
}

impl AvailabilityProcess {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.maintenance_prob) || !in_unit(self.closure_prob) {
            return Err(CoreError::Simulation(
                "maintenance/closure probabilities must lie in [0,1]".into(),
            ));
        }
        match &self.kind {
            ProcessKind::CheckinWeighted { profile, scale } => {
                profile.validate()?;
                if !scale.is_finite() || *scale < 0.0 {
                    return Err(CoreError::Simulation("scale must be non-negative".into()));
                }
            }
            ProcessKind::Bernoulli { p } => {
                if !in_unit(*p) {
                    return Err(CoreError::Simulation(
                        "bernoulli p must lie in [0,1]".into(),
                    ));
                }
            }
            ProcessKind::AlwaysOn => {}
        }
        Ok(())
    }

    /// One tick is one hour; a day is 24 ticks.
    pub fn availability_prob(&self, tick: u64) -> f64 {
        match &self.kind {
            ProcessKind::AlwaysOn => 1.0,
            ProcessKind::Bernoulli { p } => *p,
            ProcessKind::CheckinWeighted { profile, scale } => {
                let hour = (tick % 24) as usize;
                let dow = ((tick / 24) % 7) as usize;
                let max = profile.max_intensity();
                if max <= 0.0 {
                    return 1.0;
                }
                (1.0 - scale * profile.intensity[dow][hour] / max).clamp(0.0, 1.0)
            }
        }
    }
}
