//! Experiment configuration: the JSON schema, dotted-path overrides, link
//! table construction with geometric placement, and validation.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::aggregation::Participation;
use crate::error::SimError;
use crate::network::{LinkConfig, NetworkStandard};
use crate::rng::{stream, StreamKind};
use crate::training::TrainVariant;
use crate::Result;

/// Connection-failure regime applied to selected clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    None,
    Transient,
    Intermittent,
    Mixed,
}

/// Aggregation strategy to run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum StrategySpec {
    /// Server-only training on the public dataset.
    Centralized,
    /// Heuristic dataset-size weights under the configured failures.
    FedAvg,
    /// The same weights with failures switched off (upper-bound baseline).
    FedAvgIdeal,
    /// Proximal local objective.
    FedProx { mu: f64 },
    /// Control variates on server and clients.
    Scaffold,
    /// Failure-probability-weighted aggregation (unnormalized, as printed).
    TfAggregation,
    /// Connection-history stepsize correction.
    FedAwe {
        #[serde(default = "default_fedawe_gain")]
        gamma_g: f64,
    },
    /// Compensatory training plus aggregation-weight optimization.
    FedAuto,
    /// Ablation: weight optimization only (no compensatory model).
    FedAutoNoM1,
    /// Ablation: compensatory model only (simple averaging weights).
    FedAutoNoM2,
    /// Joint power/bandwidth equalization, then heuristic weights.
    ResourceOpt1FedAvg {
        #[serde(default = "default_resource_step")]
        step_size: f64,
        #[serde(default = "default_resource_iterations")]
        iterations: usize,
    },
    /// Per-standard equalization, then heuristic weights.
    ResourceOpt2FedAvg {
        #[serde(default = "default_resource_step")]
        step_size: f64,
        #[serde(default = "default_resource_iterations")]
        iterations: usize,
    },
}

impl StrategySpec {
    pub fn id(&self) -> &'static str {
        match self {
            StrategySpec::Centralized => "centralized",
            StrategySpec::FedAvg => "fed_avg",
            StrategySpec::FedAvgIdeal => "fed_avg_ideal",
            StrategySpec::FedProx { .. } => "fed_prox",
            StrategySpec::Scaffold => "scaffold",
            StrategySpec::TfAggregation => "tf_aggregation",
            StrategySpec::FedAwe { .. } => "fed_awe",
            StrategySpec::FedAuto => "fed_auto",
            StrategySpec::FedAutoNoM1 => "fed_auto_no_m1",
            StrategySpec::FedAutoNoM2 => "fed_auto_no_m2",
            StrategySpec::ResourceOpt1FedAvg { .. } => "resource_opt1_fed_avg",
            StrategySpec::ResourceOpt2FedAvg { .. } => "resource_opt2_fed_avg",
        }
    }

    pub fn train_variant(&self) -> TrainVariant {
        match self {
            StrategySpec::FedProx { mu } => TrainVariant::Prox { mu: *mu },
            StrategySpec::Scaffold => TrainVariant::Scaffold,
            _ => TrainVariant::Plain,
        }
    }
}

fn default_fedawe_gain() -> f64 {
    0.001
}
fn default_resource_step() -> f64 {
    1.0
}
fn default_resource_iterations() -> usize {
    150
}

/// Source dataset for a run.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian-mixture classification task generated from the master seed.
    Synthetic {
        classes: usize,
        features: usize,
        per_class: usize,
        test_per_class: usize,
        separation: f64,
    },
    /// IDX image/label pairs on disk (MNIST layout).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// How samples are split across the server and clients.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid {
        public_fraction: f64,
    },
    ShardNonIid {
        classes_per_client: usize,
        public_fraction: f64,
    },
}

/// Model family; input and output dimensions come from the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchSpec {
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: usize,
    },
}

fn default_hidden() -> usize {
    32
}

/// Single step-drop learning-rate hook: multiply the rate by `factor` for
/// rounds after `after_round`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    pub after_round: u64,
    pub factor: f64,
}

/// Local-training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub arch: ArchSpec,
    #[serde(default)]
    pub lr_drop: Option<LrDrop>,
}

/// One client's communication parameters, mirroring the resource table:
/// standard, transmit power (dBm), bandwidth (MHz), carrier (MHz). The
/// placement fields are drawn from the standard's geometry under the master
/// seed when absent: wireless LAN clients sit in a 20 x 20 m room around
/// the access point, cellular clients in a 200 m cell around the base
/// station.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub standard: NetworkStandard,
    pub tx_power_dbm: f64,
    pub bandwidth_mhz: f64,
    pub carrier_mhz: f64,
    pub model_size_bits: f64,
    pub tx_delay_s: f64,
    #[serde(default)]
    pub intermittent_lambda: f64,
    #[serde(default)]
    pub distance_km: Option<f64>,
    #[serde(default)]
    pub wall_count: Option<u32>,
    #[serde(default)]
    pub line_of_sight: Option<bool>,
}

/// Room half-width for indoor placement, meters.
const INDOOR_HALF_WIDTH_M: f64 = 10.0;
/// Access-point height minus client device height, meters.
const INDOOR_HEIGHT_GAP_M: f64 = 2.0;
/// Outdoor cell radius, meters.
const OUTDOOR_RADIUS_M: f64 = 200.0;
/// Base-station height minus client device height, meters.
const OUTDOOR_HEIGHT_GAP_M: f64 = 18.5;

impl LinkSpec {
    /// Materializes the link, drawing any unset placement fields from the
    /// standard's geometry under `(master_seed, client)`.
    pub fn build(&self, master_seed: u64, client: u64) -> Result<LinkConfig> {
        let mut rng = stream(master_seed, StreamKind::Placement, 0, client);
        let (distance_km, wall_count, line_of_sight) = if self.standard.is_wired() {
            (0.0, 0, true)
        } else {
            let indoor = matches!(
                self.standard,
                NetworkStandard::Wifi24 | NetworkStandard::Wifi5
            );
            let distance_km = self.distance_km.unwrap_or_else(|| {
                if indoor {
                    let x = rng.gen_range(-INDOOR_HALF_WIDTH_M..INDOOR_HALF_WIDTH_M);
                    let y = rng.gen_range(-INDOOR_HALF_WIDTH_M..INDOOR_HALF_WIDTH_M);
                    (x * x + y * y + INDOOR_HEIGHT_GAP_M * INDOOR_HEIGHT_GAP_M).sqrt() / 1000.0
                } else {
                    let r = OUTDOOR_RADIUS_M * rng.gen::<f64>().sqrt();
                    (r * r + OUTDOOR_HEIGHT_GAP_M * OUTDOOR_HEIGHT_GAP_M).sqrt() / 1000.0
                }
            });
            let wall_count =
                self.wall_count
                    .unwrap_or_else(|| if indoor { rng.gen_range(0..=2) } else { 0 });
            let line_of_sight = self.line_of_sight.unwrap_or_else(|| {
                if indoor {
                    wall_count == 0
                } else {
                    rng.gen::<f64>() < 0.5
                }
            });
            (distance_km, wall_count, line_of_sight)
        };
        let link = LinkConfig {
            standard: self.standard,
            tx_power_dbm: self.tx_power_dbm,
            bandwidth_hz: self.bandwidth_mhz * 1e6,
            carrier_mhz: self.carrier_mhz,
            distance_km,
            wall_count,
            line_of_sight,
            model_size_bits: self.model_size_bits,
            tx_delay_s: self.tx_delay_s,
        };
        link.validate()?;
        Ok(link)
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub rounds: u64,
    pub clients: usize,
    pub selected_per_round: usize,
    pub participation: Participation,
    pub failure_mode: FailureMode,
    pub strategy: StrategySpec,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub train: TrainSpec,
    pub links: Vec<LinkSpec>,
    pub master_seed: u64,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "default_diagnostic_stride")]
    pub diagnostic_stride: u64,
    #[serde(default = "default_duration_alpha")]
    pub intermittent_duration_alpha: f64,
    #[serde(default = "default_epsilon_threshold")]
    pub epsilon_threshold: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_pretrain_epochs() -> usize {
    5
}
fn default_diagnostic_stride() -> u64 {
    10
}
fn default_duration_alpha() -> f64 {
    10.0
}
fn default_epsilon_threshold() -> f64 {
    0.9
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(SimError::parameter("rounds must be at least 1"));
        }
        if self.clients == 0 {
            return Err(SimError::parameter("need at least one client"));
        }
        if self.selected_per_round == 0 || self.selected_per_round > self.clients {
            return Err(SimError::parameter(
                "selected_per_round must lie in [1, clients]",
            ));
        }
        if self.participation == Participation::Full && self.selected_per_round != self.clients {
            return Err(SimError::parameter(
                "full participation requires selected_per_round == clients",
            ));
        }
        if self.links.len() != self.clients {
            return Err(SimError::parameter(format!(
                "link table has {} entries for {} clients",
                self.links.len(),
                self.clients
            )));
        }
        if !(self.intermittent_duration_alpha > 0.0) {
            return Err(SimError::parameter(
                "intermittent_duration_alpha must be positive",
            ));
        }
        if !(0.0 < self.epsilon_threshold && self.epsilon_threshold < 1.0) {
            return Err(SimError::parameter("epsilon_threshold must lie in (0, 1)"));
        }
        if self.train.learning_rate <= 0.0
            || self.train.local_steps == 0
            || self.train.batch_size == 0
        {
            return Err(SimError::parameter("invalid training hyperparameters"));
        }
        match &self.dataset {
            DatasetSpec::Synthetic {
                classes,
                features,
                per_class,
                test_per_class,
                separation,
            } => {
                if *classes < 2 || *features == 0 || *per_class == 0 || *test_per_class == 0 {
                    return Err(SimError::parameter("invalid synthetic dataset shape"));
                }
                if !(*separation > 0.0) {
                    return Err(SimError::parameter("separation must be positive"));
                }
            }
            DatasetSpec::Idx { .. } => {}
        }
        match &self.partition {
            PartitionSpec::Iid { public_fraction }
            | PartitionSpec::ShardNonIid {
                public_fraction, ..
            } => {
                if !(0.0 < *public_fraction && *public_fraction < 1.0) {
                    return Err(SimError::parameter(
                        "public_fraction must lie strictly between 0 and 1",
                    ));
                }
            }
        }
        if let StrategySpec::FedProx { mu } = &self.strategy {
            if *mu < 0.0 {
                return Err(SimError::parameter("fed_prox mu must be nonnegative"));
            }
        }
        Ok(())
    }

    /// Materializes the full link table under this config's master seed.
    pub fn build_links(&self) -> Result<Vec<LinkConfig>> {
        self.links
            .iter()
            .enumerate()
            .map(|(i, spec)| spec.build(self.master_seed, i as u64))
            .collect()
    }
}

/// Parses a config file, applying `key.path=value` overrides before
/// deserialization. Unknown keys are rejected with the offending name.
pub fn load_config_with_overrides(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| SimError::Config(format!("{}: {e}", path.display())))?;
    for entry in overrides {
        apply_override(&mut value, entry)?;
    }
    serde_json::from_value(value).map_err(|e| SimError::Config(e.to_string()))
}

/// Sets one `dotted.path=value` override on a parsed config. Path segments
/// traverse objects by key and arrays by index; the value is parsed as JSON
/// and falls back to a bare string.
pub fn apply_override(value: &mut serde_json::Value, entry: &str) -> Result<()> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| SimError::Config(format!("override '{entry}' is not key=value")))?;
    let parsed: serde_json::Value =
        serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (k, segment) in segments.iter().enumerate() {
        let last = k + 1 == segments.len();
        match cursor {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(segment.to_string(), parsed);
                    return Ok(());
                }
                cursor = map
                    .entry(segment.to_string())
                    .or_insert(serde_json::json!({}));
            }
            serde_json::Value::Array(items) => {
                let index: usize = segment.parse().map_err(|_| {
                    SimError::Config(format!("'{segment}' is not an array index in '{path}'"))
                })?;
                if index >= items.len() {
                    return Err(SimError::Config(format!(
                        "index {index} out of bounds in '{path}'"
                    )));
                }
                if last {
                    items[index] = parsed;
                    return Ok(());
                }
                cursor = &mut items[index];
            }
            _ => {
                return Err(SimError::Config(format!(
                    "cannot descend into scalar at '{segment}' in '{path}'"
                )))
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config_json() -> serde_json::Value {
        serde_json::json!({
            "rounds": 3,
            "clients": 2,
            "selected_per_round": 2,
            "participation": "full",
            "failure_mode": "none",
            "strategy": {"name": "fed_avg"},
            "dataset": {
                "type": "synthetic",
                "classes": 2, "features": 4, "per_class": 30,
                "test_per_class": 10, "separation": 2.0
            },
            "partition": {"scheme": "iid", "public_fraction": 0.2},
            "train": {
                "learning_rate": 0.05, "local_steps": 2, "batch_size": 8,
                "arch": {"kind": "linear"}
            },
            "links": [
                {
                    "standard": "wired", "tx_power_dbm": -20.0,
                    "bandwidth_mhz": 10.0, "carrier_mhz": 0.0,
                    "model_size_bits": 6.9e6, "tx_delay_s": 0.8,
                    "intermittent_lambda": 1e-4
                },
                {
                    "standard": "wifi24", "tx_power_dbm": 20.0,
                    "bandwidth_mhz": 10.0, "carrier_mhz": 2400.0,
                    "model_size_bits": 6.9e6, "tx_delay_s": 0.8,
                    "intermittent_lambda": 1e-2
                }
            ],
            "master_seed": 7
        })
    }

    #[test]
    fn parses_and_validates() {
        let cfg: ExperimentConfig = serde_json::from_value(minimal_config_json()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.pretrain_epochs, 5);
        assert_eq!(cfg.diagnostic_stride, 10);
        assert_eq!(cfg.intermittent_duration_alpha, 10.0);
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let mut v = minimal_config_json();
        v["no_such_knob"] = serde_json::json!(1);
        let err = serde_json::from_value::<ExperimentConfig>(v).unwrap_err();
        assert!(err.to_string().contains("no_such_knob"), "{err}");
    }

    #[test]
    fn overrides_follow_dotted_paths() {
        let mut v = minimal_config_json();
        apply_override(&mut v, "train.learning_rate=0.5").unwrap();
        apply_override(&mut v, "strategy.name=fed_auto").unwrap();
        apply_override(&mut v, "links.1.tx_power_dbm=23.0").unwrap();
        let cfg: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(cfg.train.learning_rate, 0.5);
        assert_eq!(cfg.strategy, StrategySpec::FedAuto);
        assert_eq!(cfg.links[1].tx_power_dbm, 23.0);
    }

    #[test]
    fn override_rejects_bad_paths() {
        let mut v = minimal_config_json();
        assert!(apply_override(&mut v, "rounds").is_err());
        assert!(apply_override(&mut v, "links.7.tx_power_dbm=1").is_err());
        assert!(apply_override(&mut v, "rounds.deep=1").is_err());
    }

    #[test]
    fn placement_is_deterministic_and_in_geometry() {
        let spec = LinkSpec {
            standard: NetworkStandard::Cell4g,
            tx_power_dbm: 23.0,
            bandwidth_mhz: 1.8,
            carrier_mhz: 1800.0,
            model_size_bits: 6.9e6,
            tx_delay_s: 1.0,
            intermittent_lambda: 0.0,
            distance_km: None,
            wall_count: None,
            line_of_sight: None,
        };
        let a = spec.build(11, 3).unwrap();
        let b = spec.build(11, 3).unwrap();
        assert_eq!(a, b);
        let c = spec.build(12, 3).unwrap();
        assert!(a.distance_km > 0.0);
        // 200 m cell plus antenna height, in km.
        assert!(a.distance_km <= 0.21);
        assert!(a != c || a.distance_km == c.distance_km);
    }

    #[test]
    fn validation_catches_shape_errors() {
        let mut cfg: ExperimentConfig = serde_json::from_value(minimal_config_json()).unwrap();
        cfg.rounds = 0;
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = serde_json::from_value(minimal_config_json()).unwrap();
        cfg.selected_per_round = 5;
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = serde_json::from_value(minimal_config_json()).unwrap();
        cfg.links.pop();
        assert!(cfg.validate().is_err());
    }
}
