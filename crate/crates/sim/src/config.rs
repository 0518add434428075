//! Declarative experiment descriptions: node counts, dataset partitions,
//! architectures, encryption parameters, fusion strategy, and contract
//! economics. Presets mirror the four case-study shapes at desk scale.

use crate::{Result, SimError};
use chainfuse_core::ciphernet::Strategy;
use chainfuse_core::ivhe::HeParams;
use chainfuse_core::nn::{ArchSpec, Activation, InputShape, LayerSpec, Optimizer, Padding, PoolKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "case1")]
    Case1,
    #[serde(rename = "case2")]
    Case2,
    #[serde(rename = "case3-fedavg")]
    Case3FedAvg,
    #[serde(rename = "case4-fading")]
    Case4Fading,
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum DatasetSource {
    SyntheticDigits,
    SyntheticFading,
    /// Paths to IDX image/label files providing the example pool.
    Idx { images: String, labels: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContributorSpec {
    /// Label subset visible to this contributor.
    pub labels: Vec<usize>,
    pub train: usize,
    pub verify: usize,
    /// Architecture override; the scenario default applies when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<ArchSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeSpec {
    pub enabled: bool,
    pub strategy: Strategy,
    pub w: i64,
    pub l: u32,
    pub a_bound: i64,
    pub e_bound: i64,
    pub t_bound: i64,
    pub non_negative: bool,
    /// Weight scaling factor p.
    pub weight_scale: i64,
    /// Input scaling factor q.
    pub input_scale: i64,
    /// Hard-error on analytic noise-budget overruns instead of recording them.
    pub strict_noise: bool,
}

impl HeSpec {
    pub fn params(&self, n: usize) -> HeParams {
        HeParams {
            n,
            w: self.w,
            l: self.l,
            a_bound: self.a_bound,
            e_bound: self.e_bound,
            t_bound: self.t_bound,
            non_negative: self.non_negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSpec {
    /// 1 = free backprop head, 2 = gradual fusion.
    pub strategy: u8,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Strategy I epochs.
    pub epochs: usize,
    /// Strategy II stage epochs (in-block, then all weights).
    pub stage_epochs: [usize; 2],
    /// Record both strategies' accuracy trajectories in the report.
    pub evaluate_both: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicsSpec {
    pub genesis_balance: u64,
    pub initiator_budget: u64,
    pub contributor_deposit: u64,
    pub verifier_deposit: u64,
    pub contributor_reward: u64,
    pub verification_fee: u64,
    pub accuracy_threshold: f64,
    pub window_end_tick: u64,
    pub block_interval_ticks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub base_delay: u64,
    pub jitter: u64,
    pub drop_probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    /// Every client sees all classes with non-identical densities.
    FullView,
    /// Clients see label subsets in the style of the digit-task partitions.
    PartialView,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgSpec {
    pub mode: PartitionMode,
    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub train_per_client: usize,
    pub verify_per_client: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Departure {
    pub node: String,
    pub at_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub seed: u64,
    /// Number of class labels d.
    pub classes: usize,
    pub dataset: DatasetSource,
    pub contributors: Vec<ContributorSpec>,
    /// Registered verification contributors.
    pub verifiers: usize,
    /// Verifiers sampled per announcement.
    pub verifier_count: usize,
    /// Initiator's sample set shared with verifiers (half train, half holdout).
    pub sample_size: usize,
    /// Initiator's evaluation set.
    pub test_size: usize,
    pub arch: ArchSpec,
    pub train: TrainSpec,
    pub he: HeSpec,
    pub fusion: FusionSpec,
    pub economics: EconomicsSpec,
    pub network: NetworkSpec,
    /// Evaluate accepted models in cipherspace (plain vs encrypted columns).
    pub cipher_eval: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedavg: Option<FedAvgSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub departures: Vec<Departure>,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(SimError::Config(m));
        if self.classes == 0 {
            return fail("classes must be positive".into());
        }
        for (i, c) in self.contributors.iter().enumerate() {
            if c.labels.is_empty() || c.labels.iter().any(|&l| l >= self.classes) {
                return fail(format!("contributor {i} labels must be within 0..{}", self.classes));
            }
            if c.train == 0 {
                return fail(format!("contributor {i} needs training data"));
            }
        }
        if self.verifiers == 0 {
            return fail("at least one registered verifier is required".into());
        }
        if self.verifier_count == 0 || self.verifier_count > self.verifiers {
            return fail(format!(
                "verifier_count must be in 1..={}, got {}",
                self.verifiers, self.verifier_count
            ));
        }
        if self.sample_size < 2 || self.test_size == 0 {
            return fail("sample and test sets must be non-trivial".into());
        }
        if !(0.0..=1.0).contains(&self.economics.accuracy_threshold) {
            return fail("accuracy threshold must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.network.drop_probability) {
            return fail("drop probability must lie in [0, 1]".into());
        }
        if self.fusion.strategy != 1 && self.fusion.strategy != 2 {
            return fail("fusion strategy must be 1 or 2".into());
        }
        if self.he.enabled {
            self.he.params(1).validate().map_err(SimError::Ivhe)?;
            if self.he.weight_scale < 1 || self.he.input_scale < 1 {
                return fail("scaling factors must be >= 1".into());
            }
        }
        if self.economics.block_interval_ticks == 0 {
            return fail("block interval must be positive".into());
        }
        let needed = 12 + 6 * self.contributors.len() as u64;
        if self.economics.window_end_tick < needed {
            return fail(format!(
                "window_end_tick {} too small for {} contributors (need >= {needed})",
                self.economics.window_end_tick,
                self.contributors.len()
            ));
        }
        if let Some(f) = &self.fedavg {
            if f.clients == 0 || f.rounds == 0 || f.local_epochs == 0 || f.train_per_client == 0 {
                return fail("federated comparison parameters must be positive".into());
            }
        }
        Ok(())
    }

    pub fn preset(kind: ScenarioKind, seed: u64) -> ScenarioConfig {
        match kind {
            ScenarioKind::Case1 => Self::case1(seed),
            ScenarioKind::Case2 => Self::case2(seed),
            ScenarioKind::Case3FedAvg => Self::case3(seed),
            ScenarioKind::Case4Fading => Self::case4(seed),
            ScenarioKind::Custom => Self::case1(seed),
        }
    }

    fn digits_input() -> InputShape {
        InputShape::Image { channels: 1, height: 28, width: 28 }
    }

    fn default_train() -> TrainSpec {
        TrainSpec {
            optimizer: Optimizer::adam(),
            batch_size: 50,
            learning_rate: 1e-3,
            max_epochs: 30,
        }
    }

    fn he_disabled() -> HeSpec {
        HeSpec {
            enabled: false,
            strategy: Strategy::ElementWise,
            w: 1 << 10,
            l: 32,
            a_bound: 16,
            e_bound: 1,
            t_bound: 16,
            non_negative: false,
            weight_scale: 1 << 7,
            input_scale: 1000,
            strict_noise: false,
        }
    }

    fn default_economics(window_end_tick: u64) -> EconomicsSpec {
        EconomicsSpec {
            genesis_balance: 500,
            initiator_budget: 2000,
            contributor_deposit: 50,
            verifier_deposit: 20,
            contributor_reward: 100,
            verification_fee: 10,
            accuracy_threshold: 0.9,
            window_end_tick,
            block_interval_ticks: 1,
        }
    }

    fn default_network() -> NetworkSpec {
        NetworkSpec { base_delay: 1, jitter: 1, drop_probability: 0.0 }
    }

    /// Ten-class digit task, three partial-view contributors, no encryption,
    /// both fusion strategies recorded.
    pub fn case1(seed: u64) -> ScenarioConfig {
        let arch = ArchSpec {
            input: Self::digits_input(),
            layers: vec![
                LayerSpec::Conv { filters: 8, kernel: [5, 5], padding: Padding::Same },
                LayerSpec::Pool { pool: PoolKind::Max, size: 2 },
                LayerSpec::Conv { filters: 8, kernel: [5, 5], padding: Padding::Same },
                LayerSpec::Pool { pool: PoolKind::Max, size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 64 },
                LayerSpec::Activation { activation: Activation::Relu },
                LayerSpec::Dense { units: 10 },
                LayerSpec::Softmax,
            ],
        };
        let part = |labels: Vec<usize>| ContributorSpec { labels, train: 1000, verify: 1000, arch: None };
        ScenarioConfig {
            scenario: ScenarioKind::Case1,
            seed,
            classes: 10,
            dataset: DatasetSource::SyntheticDigits,
            contributors: vec![
                part(vec![0, 1, 2, 3, 4]),
                part(vec![0, 6, 7, 8, 9]),
                part(vec![5, 6, 7, 8, 9]),
            ],
            verifiers: 3,
            verifier_count: 3,
            sample_size: 400,
            test_size: 800,
            arch,
            train: Self::default_train(),
            he: Self::he_disabled(),
            fusion: FusionSpec {
                strategy: 2,
                learning_rate: 0.01,
                batch_size: 40,
                epochs: 60,
                stage_epochs: [30, 30],
                evaluate_both: true,
            },
            economics: Self::default_economics(60),
            network: Self::default_network(),
            cipher_eval: false,
            fedavg: None,
            departures: Vec::new(),
        }
    }

    /// Digit task with the encryption interface on: linear/avg-pool models,
    /// element-wise encryption of the first convolution.
    pub fn case2(seed: u64) -> ScenarioConfig {
        let arch = ArchSpec {
            input: Self::digits_input(),
            layers: vec![
                LayerSpec::Conv { filters: 6, kernel: [5, 5], padding: Padding::Same },
                LayerSpec::Pool { pool: PoolKind::Avg, size: 2 },
                LayerSpec::Conv { filters: 12, kernel: [5, 5], padding: Padding::Same },
                LayerSpec::Pool { pool: PoolKind::Avg, size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 10 },
                LayerSpec::Softmax,
            ],
        };
        let part = |labels: Vec<usize>| ContributorSpec { labels, train: 1000, verify: 1000, arch: None };
        ScenarioConfig {
            scenario: ScenarioKind::Case2,
            seed,
            classes: 10,
            dataset: DatasetSource::SyntheticDigits,
            contributors: vec![
                part(vec![0, 1, 2, 3, 4, 5, 6]),
                part(vec![0, 1, 2, 3, 4, 8, 9]),
                part(vec![0, 1, 2, 6, 7, 8, 9]),
            ],
            verifiers: 3,
            verifier_count: 3,
            sample_size: 300,
            test_size: 800,
            arch,
            train: Self::default_train(),
            he: HeSpec {
                enabled: true,
                strategy: Strategy::ElementWise,
                w: 1 << 10,
                l: 32,
                a_bound: 16,
                e_bound: 0,
                t_bound: 16,
                non_negative: false,
                weight_scale: 1 << 7,
                input_scale: 1000,
                strict_noise: false,
            },
            fusion: FusionSpec {
                strategy: 2,
                learning_rate: 0.01,
                batch_size: 40,
                epochs: 60,
                stage_epochs: [30, 30],
                evaluate_both: false,
            },
            economics: Self::default_economics(60),
            network: Self::default_network(),
            cipher_eval: true,
            fedavg: None,
            departures: Vec::new(),
        }
    }

    /// Comparison against federated averaging in a secure environment: no
    /// encryption, one verifier, plus a FedAvg baseline over four clients.
    pub fn case3(seed: u64) -> ScenarioConfig {
        let arch = ArchSpec {
            input: Self::digits_input(),
            layers: vec![
                LayerSpec::Conv { filters: 6, kernel: [3, 3], padding: Padding::Same },
                LayerSpec::Pool { pool: PoolKind::Max, size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 32 },
                LayerSpec::Activation { activation: Activation::Relu },
                LayerSpec::Dense { units: 10 },
                LayerSpec::Softmax,
            ],
        };
        let part = |labels: Vec<usize>| ContributorSpec { labels, train: 800, verify: 400, arch: None };
        ScenarioConfig {
            scenario: ScenarioKind::Case3FedAvg,
            seed,
            classes: 10,
            dataset: DatasetSource::SyntheticDigits,
            contributors: vec![
                part(vec![0, 1, 2, 3, 4]),
                part(vec![0, 6, 7, 8, 9]),
                part(vec![5, 6, 7, 8, 9]),
            ],
            verifiers: 1,
            verifier_count: 1,
            sample_size: 300,
            test_size: 800,
            arch,
            train: Self::default_train(),
            he: Self::he_disabled(),
            fusion: FusionSpec {
                strategy: 2,
                learning_rate: 0.01,
                batch_size: 40,
                epochs: 50,
                stage_epochs: [25, 25],
                evaluate_both: false,
            },
            economics: Self::default_economics(60),
            network: Self::default_network(),
            cipher_eval: false,
            fedavg: Some(FedAvgSpec {
                mode: PartitionMode::PartialView,
                clients: 4,
                rounds: 4,
                local_epochs: 3,
                train_per_client: 800,
                verify_per_client: 400,
            }),
            departures: Vec::new(),
        }
    }

    /// Fading-channel detection with ReLU models and the encryption interface
    /// on, evaluating both encryption strategies.
    pub fn case4(seed: u64) -> ScenarioConfig {
        let arch = ArchSpec {
            input: InputShape::Image { channels: 1, height: 1, width: 64 },
            layers: vec![
                LayerSpec::Conv { filters: 8, kernel: [1, 5], padding: Padding::Same },
                LayerSpec::Activation { activation: Activation::Relu },
                LayerSpec::Conv { filters: 4, kernel: [1, 5], padding: Padding::Same },
                LayerSpec::Activation { activation: Activation::Relu },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 2 },
                LayerSpec::Softmax,
            ],
        };
        let part = || ContributorSpec { labels: vec![0, 1], train: 1500, verify: 500, arch: None };
        ScenarioConfig {
            scenario: ScenarioKind::Case4Fading,
            seed,
            classes: 2,
            dataset: DatasetSource::SyntheticFading,
            contributors: vec![part(), part(), part()],
            verifiers: 3,
            verifier_count: 3,
            sample_size: 300,
            test_size: 600,
            arch,
            train: Self::default_train(),
            he: HeSpec {
                enabled: true,
                strategy: Strategy::ElementWise,
                w: 1 << 10,
                l: 30,
                a_bound: 2,
                e_bound: 1,
                t_bound: 0,
                non_negative: true,
                weight_scale: 1 << 7,
                input_scale: 1000,
                strict_noise: false,
            },
            fusion: FusionSpec {
                strategy: 2,
                learning_rate: 0.01,
                batch_size: 40,
                epochs: 40,
                stage_epochs: [20, 20],
                evaluate_both: false,
            },
            economics: Self::default_economics(60),
            network: Self::default_network(),
            cipher_eval: true,
            fedavg: None,
            departures: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for kind in [
            ScenarioKind::Case1,
            ScenarioKind::Case2,
            ScenarioKind::Case3FedAvg,
            ScenarioKind::Case4Fading,
        ] {
            ScenarioConfig::preset(kind, 7).validate().unwrap();
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut cfg = ScenarioConfig::case1(1);
        cfg.contributors[0].labels = vec![10];
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::case1(1);
        cfg.verifier_count = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::case1(1);
        cfg.network.drop_probability = 1.5;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::case2(1);
        cfg.he.w = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::case1(1);
        cfg.economics.window_end_tick = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip_is_identity() {
        let cfg = ScenarioConfig::case4(99);
        let js = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&js).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let cfg = ScenarioConfig::case1(1);
        let mut v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        v.as_object_mut().unwrap().insert("surprise".into(), serde_json::json!(1));
        assert!(serde_json::from_value::<ScenarioConfig>(v).is_err());
    }
}
