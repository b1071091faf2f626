//! Experiment config files: UTF-8 `key = value` lines covering the model
//! and training keys. Unknown keys are rejected by name. The `PMOE_SEED`
//! environment variable overrides the seed.

use super::optim::TrainConfig;
use crate::backbone::BackboneConfig;
use crate::model::{parse_dispatcher, parse_layer_list, parse_usize, DispatcherKind, Mode, ModelConfig};
use crate::{Error, Result};

/// Parsed experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Explicit generator seeds for the frozen experts; when absent the
    /// experts derive from the training seed.
    pub expert_seeds: Option<Vec<u64>>,
}

const KNOWN_KEYS: &[&str] = &[
    // backbone
    "image_h",
    "image_w",
    "patch_size",
    "channels",
    "embed_dim",
    "num_layers",
    "num_heads",
    "mlp_ratio",
    "eps",
    // model
    "mode",
    "num_experts",
    "prompts_per_expert",
    "prompted_layers",
    "dispatcher",
    "num_classes",
    // training
    "learning_rate",
    "weight_decay",
    "batch_size",
    "epochs",
    "seed",
    "beta1",
    "beta2",
    "adam_eps",
    // expert generation
    "expert_seeds",
];

pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!("malformed config line: {line}")));
        };
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if !KNOWN_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate config key: {key}")));
        }
    }
    let get = |k: &str| map.get(k).cloned();
    let require = |k: &str| {
        get(k).ok_or_else(|| Error::Config(format!("missing config key: {k}")))
    };
    let req_usize = |k: &str| -> Result<usize> { parse_usize(k, &require(k)?) };
    let opt_f64 = |k: &str, default: f64| -> Result<f64> {
        match get(k) {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad number for {k}: {v:?}"))),
            None => Ok(default),
        }
    };
    let opt_usize = |k: &str, default: usize| -> Result<usize> {
        match get(k) {
            Some(v) => parse_usize(k, &v),
            None => Ok(default),
        }
    };

    let backbone = BackboneConfig {
        image_h: req_usize("image_h")?,
        image_w: req_usize("image_w")?,
        patch_size: req_usize("patch_size")?,
        channels: opt_usize("channels", 1)?,
        embed_dim: req_usize("embed_dim")?,
        num_layers: req_usize("num_layers")?,
        num_heads: req_usize("num_heads")?,
        mlp_ratio: opt_f64("mlp_ratio", 4.0)?,
        eps: opt_f64("eps", 1e-6)?,
    };
    let prompted_layers = match get("prompted_layers") {
        Some(v) => parse_layer_list(&v)?,
        None => (0..backbone.num_layers).collect(),
    };
    let dispatcher = match get("dispatcher") {
        Some(v) => parse_dispatcher(&v)?,
        None => DispatcherKind::Plain,
    };
    let mode = match get("mode") {
        Some(v) => Mode::parse(&v)?,
        None => Mode::Pmoe,
    };
    let model = ModelConfig {
        backbone,
        num_experts: req_usize("num_experts")?,
        prompts_per_expert: req_usize("prompts_per_expert")?,
        prompted_layers,
        dispatcher,
        mode,
        num_classes: req_usize("num_classes")?,
    };
    model.validate()?;

    let mut train = TrainConfig {
        learning_rate: opt_f64("learning_rate", 1e-4)?,
        weight_decay: opt_f64("weight_decay", 1e-5)?,
        batch_size: opt_usize("batch_size", 32)?,
        epochs: opt_usize("epochs", 30)?,
        seed: match get("seed") {
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad integer for seed: {v:?}")))?,
            None => 0,
        },
        beta1: opt_f64("beta1", 0.9)?,
        beta2: opt_f64("beta2", 0.999)?,
        adam_eps: opt_f64("adam_eps", 1e-8)?,
    };
    if let Ok(seed) = std::env::var("PMOE_SEED") {
        train.seed = seed
            .parse()
            .map_err(|_| Error::Config(format!("bad PMOE_SEED value: {seed:?}")))?;
    }
    train.validate()?;
    let expert_seeds = match get("expert_seeds") {
        Some(v) => {
            let seeds: Vec<u64> = v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad expert seed {s:?}")))
                })
                .collect::<Result<_>>()?;
            if seeds.len() != model.num_experts {
                return Err(Error::Config(format!(
                    "expert_seeds lists {} seeds for {} experts",
                    seeds.len(),
                    model.num_experts
                )));
            }
            Some(seeds)
        }
        None => None,
    };
    Ok(ExperimentConfig {
        model,
        train,
        expert_seeds,
    })
}
