//! Scenario file: simulated backends plus clock settings.

use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{ComputeSim, ComputeSimConfig, SharedDdm, TapeSim, TapeSimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Real,
}

fn default_tick() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockConfig {
    pub mode: ClockMode,
    /// Seconds between daemon polls.
    #[serde(default = "default_tick")]
    pub tick: f64,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            mode: ClockMode::Virtual,
            tick: default_tick(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub tape: TapeSimConfig,
    pub compute: ComputeSimConfig,
    #[serde(default)]
    pub clock: ClockConfig,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, String> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| e.to_string())?;
        s.validate()?;
        Ok(s)
    }

    pub fn render(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.tape.validate()?;
        self.compute.validate()?;
        if !(self.clock.tick.is_finite() && self.clock.tick > 0.0) {
            return Err("clock.tick must be positive".into());
        }
        Ok(())
    }

    /// Fresh backends for one run. The compute farm reads stage times from
    /// the tape.
    pub fn build(&self) -> Result<(Arc<Mutex<TapeSim>>, Arc<Mutex<ComputeSim>>), String> {
        let tape = Arc::new(Mutex::new(TapeSim::new(self.tape.clone())?));
        let input: SharedDdm = tape.clone();
        let compute = ComputeSim::new(self.compute.clone(), Some(input))?;
        Ok((tape, Arc::new(Mutex::new(compute))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_render_roundtrip() {
        let s = Scenario {
            tape: TapeSimConfig::uniform("s", "d", 3, 10, 1.0, 1),
            compute: ComputeSimConfig::new(2, 1.0),
            clock: ClockConfig::default(),
        };
        let text = s.render();
        assert_eq!(Scenario::parse(&text).unwrap(), s);
    }

    #[test]
    fn strict_schema() {
        let bad = r#"{"tape":{"scope":"s","dataset":"d","files":[],"schedule":{"rate":{"files_per_second":1}}},
                      "compute":{"workers":1,"per_file_processing_time":1},"extra":1}"#;
        assert!(Scenario::parse(bad).is_err());
        let zero = bad.replace(",\"extra\":1", "").replace("\"workers\":1", "\"workers\":0");
        assert!(Scenario::parse(&zero).unwrap_err().contains("workers"));
    }
}
