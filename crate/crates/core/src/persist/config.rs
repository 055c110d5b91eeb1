use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::intercoord::{IcConfig, IcHyper, WmmseConfig};
use crate::numcore::Activation;
use crate::pra::{PraConfig, PraHyper};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Pra,
    Ic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "pinn")]
    Pinn,
    #[serde(rename = "pinn-adp-k")]
    PinnAdpK,
    #[serde(rename = "fc")]
    Fc,
}

impl ModelKind {
    pub fn adapts_k(self) -> bool {
        self == ModelKind::PinnAdpK
    }
}

/// Interference-coordination settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcSection {
    pub k_max: usize,
    pub channel: IcConfig,
    pub wmmse: WmmseConfig,
    /// Training settings; `lr` applies to the dense baseline.
    pub train: IcHyper,
    /// Learning rate of the PINN models.
    pub pinn_lr: f64,
    /// Square block sizes of the PINN-2D layers, `1 … 1`.
    pub pinn_blocks: Vec<usize>,
    pub fc_hidden: Vec<usize>,
    pub activation: Activation,
    /// Training-set sizes swept by the benchmark.
    pub bench_sizes: Vec<usize>,
    /// Target ratio of WMMSE sum-rate for the benchmark.
    pub target: f64,
    /// Every benchmark run takes at least this many minibatch steps.
    pub bench_min_steps: usize,
}

impl Default for IcSection {
    fn default() -> Self {
        IcSection {
            k_max: 10,
            channel: IcConfig::default(),
            wmmse: WmmseConfig::default(),
            train: IcHyper::default(),
            pinn_lr: 0.01,
            pinn_blocks: vec![1, 3, 3, 1],
            fc_hidden: vec![200, 200],
            activation: Activation::Relu,
            bench_sizes: vec![50, 100, 200, 500, 1000, 2000, 5000],
            target: 0.75,
            bench_min_steps: 1000,
        }
    }
}

impl IcSection {
    /// Training settings for a PINN (`pinn`) or the dense baseline.
    pub fn hyper(&self, pinn: bool) -> IcHyper {
        if pinn {
            IcHyper { lr: self.pinn_lr, ..self.train.clone() }
        } else {
            self.train.clone()
        }
    }
}

/// Everything one command run needs. Seeds are explicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelKind,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub out_dir: PathBuf,
    pub pra: PraConfig,
    pub pra_train: PraHyper,
    pub ic: IcSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::Ic,
            model: ModelKind::PinnAdpK,
            seed: 0,
            train_samples: 1000,
            test_samples: 200,
            out_dir: PathBuf::from("out"),
            pra: PraConfig::default(),
            pra_train: PraHyper::default(),
            ic: IcSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config { field: field.into(), message: message.into() })
        };
        self.pra.validate()?;
        self.pra_train.validate()?;
        self.ic.channel.validate()?;
        if !(self.ic.wmmse.tolerance > 0.0) {
            return bad("ic.wmmse.tolerance", "must be positive");
        }
        if self.task == Task::Pra && self.model == ModelKind::Fc {
            return bad("model", "the PRA task trains PINN-1D models only");
        }
        if self.ic.k_max == 0 {
            return bad("ic.k_max", "must be positive");
        }
        let b = &self.ic.pinn_blocks;
        if b.len() < 2 || b[0] != 1 || b[b.len() - 1] != 1 || b.contains(&0) {
            return bad("ic.pinn_blocks", "must start and end with 1 and hold positive sizes");
        }
        if self.ic.fc_hidden.contains(&0) {
            return bad("ic.fc_hidden", "widths must be positive");
        }
        if self.ic.train.batch_size < 2 {
            return bad("ic.train.batch_size", "must be at least 2");
        }
        if !(self.ic.train.lr >= 0.0) {
            return bad("ic.train.lr", "must be non-negative");
        }
        if !(self.ic.pinn_lr >= 0.0) {
            return bad("ic.pinn_lr", "must be non-negative");
        }
        if !(self.ic.target > 0.0 && self.ic.target <= 1.0) {
            return bad("ic.target", "must lie in (0, 1]");
        }
        if self.ic.bench_sizes.windows(2).any(|w| w[0] >= w[1]) || self.ic.bench_sizes.contains(&0) {
            return bad("ic.bench_sizes", "must be positive and strictly increasing");
        }
        Ok(())
    }
}

/// Parses a JSON config. Missing keys take defaults; unknown keys and
/// invalid values are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = if text.trim().is_empty() {
        ExperimentConfig::default()
    } else {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_string(cfg: &ExperimentConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ExperimentConfig::default());
        assert_eq!(parse_config("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config("{\n  \"foo\": 1\n}").unwrap_err();
        match err {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("foo"));
            }
            e => panic!("{e}"),
        }
        let nested = parse_config(r#"{"ic": {"train": {"bogus": 2}}}"#).unwrap_err();
        assert!(nested.to_string().contains("bogus"));
    }

    #[test]
    fn validation_names_the_field() {
        let e = parse_config(r#"{"ic": {"target": 2.0}}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "ic.target"), "{e}");
        let e = parse_config(r#"{"task": "pra", "model": "fc"}"#).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "model"));
    }

    #[test]
    fn table_shaped_config_round_trips() {
        let text = r#"{"task": "ic", "model": "pinn-adp-k", "seed": 7,
            "ic": {"k_max": 30, "pinn_blocks": [1, 3, 3, 1], "fc_hidden": [600, 600],
                   "train": {"lr": 0.001, "batch_size": 64, "epochs": 100}}}"#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.ic.k_max, 30);
        assert_eq!(parse_config(&config_to_string(&cfg)).unwrap(), cfg);
    }
}
