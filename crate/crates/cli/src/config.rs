use std::path::Path;

use anyhow::{Context, Result};
use paai_core::ingest::{ColumnMap, DEFAULT_SMOOTH_WINDOW};
use paai_core::paai::{AccLoss, NetworkConfig, VarianceOf};
use paai_core::stats::DEFAULT_JERK_WINDOW;
use paai_core::{PhaseConfig, SimConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "PAAI_CONFIG";

/// Resolved run configuration. Every field has a default, so a config file
/// only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub dt: f64,
    pub ingest: IngestSection,
    pub stats: StatsSection,
    pub train: TrainSection,
    pub phase: PhaseConfig,
    pub sim: SimSection,
    pub ring: RingSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 42,
            dt: 0.1,
            ingest: IngestSection::default(),
            stats: StatsSection::default(),
            train: TrainSection::default(),
            phase: PhaseConfig::default(),
            sim: SimSection::default(),
            ring: RingSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub time_col: String,
    pub lead_speed_col: String,
    pub foll_speed_col: String,
    pub spacing_col: Option<String>,
    pub lead_lat_col: Option<String>,
    pub lead_lon_col: Option<String>,
    pub foll_lat_col: Option<String>,
    pub foll_lon_col: Option<String>,
    pub delimiter: char,
    pub smooth_window: usize,
}

impl Default for IngestSection {
    fn default() -> Self {
        let m = ColumnMap::default();
        Self {
            time_col: m.timestamp,
            lead_speed_col: m.lead_speed,
            foll_speed_col: m.foll_speed,
            spacing_col: m.spacing,
            lead_lat_col: None,
            lead_lon_col: None,
            foll_lat_col: None,
            foll_lon_col: None,
            delimiter: ',',
            smooth_window: DEFAULT_SMOOTH_WINDOW,
        }
    }
}

impl IngestSection {
    pub fn column_map(&self) -> Result<ColumnMap> {
        anyhow::ensure!(self.delimiter.is_ascii(), "delimiter must be a single ASCII character");
        Ok(ColumnMap {
            timestamp: self.time_col.clone(),
            lead_speed: self.lead_speed_col.clone(),
            foll_speed: self.foll_speed_col.clone(),
            spacing: self.spacing_col.clone(),
            lead_lat: self.lead_lat_col.clone(),
            lead_lon: self.lead_lon_col.clone(),
            foll_lat: self.foll_lat_col.clone(),
            foll_lon: self.foll_lon_col.clone(),
            delimiter: self.delimiter as u8,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub kde_points: usize,
    pub max_lag: usize,
    pub jerk_window: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self {
            kde_points: 256,
            max_lag: 2000,
            jerk_window: DEFAULT_JERK_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub members: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub stride: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub network: NetworkConfig,
    /// Overrides the accuracy term chosen by the model kind.
    pub acc_loss: Option<AccLoss>,
    pub variance_of: VarianceOf,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = paai_core::paai::TrainConfig::default();
        Self {
            members: 5,
            max_epochs: t.max_epochs,
            patience: t.patience,
            batch_size: t.batch_size,
            stride: t.stride,
            learning_rate: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            network: NetworkConfig::default(),
            acc_loss: None,
            variance_of: VarianceOf::Prediction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub clamp_speed_at_zero: bool,
    pub accel_bounds: Option<(f64, f64)>,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            clamp_speed_at_zero: s.clamp_speed_at_zero,
            accel_bounds: s.accel_bounds,
        }
    }
}

impl SimSection {
    pub fn sim_config(&self, dt: f64) -> SimConfig {
        SimConfig {
            dt,
            clamp_speed_at_zero: self.clamp_speed_at_zero,
            accel_bounds: self.accel_bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RingSection {
    pub vehicles: usize,
    pub length: f64,
    pub duration: f64,
    /// Initial speed; `None` starts every vehicle at the model's equilibrium speed.
    pub speed: Option<f64>,
    /// Spacing moved from vehicle 1 to vehicle 0 at the start.
    pub perturbation: f64,
}

impl Default for RingSection {
    fn default() -> Self {
        Self {
            vehicles: 22,
            length: 230.0,
            duration: 300.0,
            speed: None,
            perturbation: 1.0,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path`, or the file named by [`CONFIG_ENV`], or falls back to defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let env_path = std::env::var_os(CONFIG_ENV).map(std::path::PathBuf::from);
        match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        anyhow::ensure!(self.dt > 0.0 && self.dt.is_finite(), "dt must be positive");
        anyhow::ensure!(self.train.members > 0, "train.members must be at least 1");
        anyhow::ensure!(self.ring.vehicles >= 2, "ring.vehicles must be at least 2");
        self.phase.validate()?;
        self.train.network.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = Config::from_toml("seed = 7\n[train]\nmembers = 3\n[train.network]\nhidden = 8\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.members, 3);
        assert_eq!(c.train.network.hidden, 8);
        assert_eq!(c.train.network.seq_len, NetworkConfig::default().seq_len);
        assert_eq!(c.train.patience, 15);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::from_toml("sede = 1").is_err());
    }

    #[test]
    fn snapshot_round_trips_through_toml() {
        let c = Config::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
    }
}
