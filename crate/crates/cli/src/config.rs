//! Run configuration (TOML). One file fully determines a run; every
//! optional key has its default listed in the README table.

use std::collections::BTreeMap;
use std::path::Path;

use brokenbind_core::diffnet::{AdamW, Nonlinearity};
use brokenbind_core::eval::ModalityFlow;
use brokenbind_core::losses::LossWeights;
use brokenbind_core::synthgen::DataConfig;
use brokenbind_core::trainer::{mlp_encoders, Arm, ExperimentConfig};
use brokenbind_core::ModalityId;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub nonlinearity: Nonlinearity,
    /// Per-modality scale on similarities; missing modalities use 1.
    pub temperature_scale: BTreeMap<String, f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden_dim: 64, embed_dim: 16, nonlinearity: Nonlinearity::Tanh, temperature_scale: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightsSection {
    pub clip: f64,
    pub sym: f64,
    pub mox: f64,
    pub fro: f64,
}

impl Default for WeightsSection {
    fn default() -> Self {
        let w = LossWeights::default();
        WeightsSection { clip: w.w_clip, sym: w.w_sym, mox: w.w_mox, fro: w.w_fro }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub stage1_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tau: f64,
    pub eval_every: usize,
    pub weights: WeightsSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = AdamW::default();
        TrainSection {
            epochs: 50,
            pretrain_epochs: 25,
            stage1_epochs: 5,
            batch_size: 16,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            tau: brokenbind_core::losses::DEFAULT_TAU,
            eval_every: 0,
            weights: WeightsSection::default(),
        }
    }
}

fn default_block() -> usize {
    8
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_arms() -> Vec<String> {
    Arm::ALL.iter().map(|a| a.name().to_string()).collect()
}
fn default_sweep() -> Vec<usize> {
    vec![0, 25, 50]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub flow: String,
    #[serde(default = "default_block")]
    pub fidelity_block: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_arms")]
    pub arms: Vec<String>,
    #[serde(default = "default_sweep")]
    pub pretrain_sweep: Vec<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        let rows = cfg.train.batch_size / cfg.data.datasets.len();
        if cfg.model.embed_dim <= rows {
            log::warn!(
                "model.embed_dim {} is not above the {rows} rows each dataset contributes to a batch; \
                 pivot pseudo-inverses may be ill-conditioned",
                cfg.model.embed_dim
            );
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate().map_err(|e| CliError::Config(format!("data.{}", strip(e))))?;
        let n = self.data.datasets.len();
        if n != 2 && n != 3 {
            return Err(CliError::Config(format!("data.datasets: expected 2 or 3 datasets, found {n}")));
        }
        for m in self.model.temperature_scale.keys() {
            if !self.data.views.iter().any(|v| v.modality.as_str() == m) {
                return Err(CliError::Config(format!("model.temperature_scale.{m}: no such modality")));
            }
        }
        self.flow()?;
        self.arms()?;
        if self.eval.fidelity_block == 0 {
            return Err(CliError::Config("eval.fidelity_block: must be positive".into()));
        }
        self.experiment(self.seed).validate().map_err(|e| CliError::Config(format!("train: {}", strip(e))))?;
        Ok(())
    }

    pub fn flow(&self) -> CliResult<ModalityFlow> {
        ModalityFlow::parse(&self.eval.flow).map_err(|e| CliError::Config(format!("eval.flow: {e}")))
    }

    pub fn arms(&self) -> CliResult<Vec<Arm>> {
        self.eval.arms.iter().map(|a| Arm::parse(a).map_err(|e| CliError::Config(format!("eval.arms: {}", strip(e))))).collect()
    }

    pub fn weights(&self) -> LossWeights {
        let w = &self.train.weights;
        LossWeights { w_clip: w.clip, w_sym: w.sym, w_mox: w.mox, w_fro: w.fro }
    }

    /// Trainer settings with the given seed; one encoder per declared view.
    pub fn experiment(&self, seed: u64) -> ExperimentConfig {
        let t = &self.train;
        let inputs: Vec<(ModalityId, usize, f64)> = self
            .data
            .views
            .iter()
            .map(|v| (v.modality.clone(), v.raw_dim, self.model.temperature_scale.get(v.modality.as_str()).copied().unwrap_or(1.0)))
            .collect();
        ExperimentConfig {
            seed,
            epochs: t.epochs,
            pretrain_epochs: t.pretrain_epochs,
            stage1_epochs: t.stage1_epochs,
            batch_size: t.batch_size,
            optimizer: AdamW { lr: t.lr, weight_decay: t.weight_decay, beta1: t.beta1, beta2: t.beta2, eps: t.eps },
            tau: t.tau,
            weights: self.weights(),
            encoders: mlp_encoders(&inputs, self.model.hidden_dim, self.model.embed_dim, self.model.nonlinearity),
            eval_every: t.eval_every,
        }
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so key
    /// order and formatting in the TOML file do not matter.
    pub fn hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
    }
}

fn strip(e: brokenbind_core::Error) -> String {
    match e {
        brokenbind_core::Error::Config(m) => m,
        other => other.to_string(),
    }
}

/// JSON text with object keys in sorted order at every level.
pub fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", serde_json::to_string(k).expect("string"), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(xs) => format!("[{}]", xs.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 1
[data]
latent_dim = 2
num_classes = 2
center_scale = 1.0
within_class_std = 0.5
num_samples = 16
test_samples = 8
views = [
  { modality = "a", raw_dim = 3, noise_std = 0.1 },
  { modality = "b", raw_dim = 3, noise_std = 0.1 },
  { modality = "c", raw_dim = 3, noise_std = 0.1 },
]
datasets = [
  { id = "d1", observable = ["a", "b"], hidden_target = "c" },
  { id = "d2", observable = ["b", "c"], shift = 1.0 },
]
[eval]
flow = "a-b-c"
"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.train.pretrain_epochs, 25);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.weight_decay, 0.2);
        assert_eq!(c.train.tau, 0.07);
        assert_eq!(c.model.hidden_dim, 64);
        assert_eq!(c.eval.seeds, vec![0, 1, 2, 3, 4]);
        let e = c.experiment(3);
        assert_eq!(e.encoders[0].layer_dims, vec![3, 64, 16]);
    }

    #[test]
    fn hash_ignores_key_order() {
        let reordered = MINIMAL.replace("latent_dim = 2\nnum_classes = 2", "num_classes = 2\nlatent_dim = 2");
        assert_ne!(reordered, MINIMAL);
        assert_eq!(RunConfig::parse(MINIMAL).unwrap().hash(), RunConfig::parse(&reordered).unwrap().hash());
        let changed = MINIMAL.replace("seed = 1", "seed = 2");
        assert_ne!(RunConfig::parse(MINIMAL).unwrap().hash(), RunConfig::parse(&changed).unwrap().hash());
    }

    #[test]
    fn missing_view_names_the_field() {
        let bad = MINIMAL.replace("  { modality = \"c\", raw_dim = 3, noise_std = 0.1 },\n", "");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("data.datasets[0].hidden_target"), "{err}");
    }

    #[test]
    fn unknown_key_reports_location() {
        let bad = MINIMAL.replace("[eval]", "[train]\nepohcs = 3\n[eval]");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("epohcs") && err.contains("line"), "{err}");
    }

    #[test]
    fn bad_flow_and_arm() {
        assert!(RunConfig::parse(&MINIMAL.replace("a-b-c", "a--c")).unwrap_err().to_string().contains("eval.flow"));
        let bad = MINIMAL.replace("flow = \"a-b-c\"", "flow = \"a-b-c\"\narms = [\"full\", \"bogus\"]");
        assert!(RunConfig::parse(&bad).unwrap_err().to_string().contains("eval.arms"));
    }
}
