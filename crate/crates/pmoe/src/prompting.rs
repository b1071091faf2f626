//! Learnable prompt-token banks and the single-expert VPT baselines.
//!
//! A [`PromptBank`] holds one `K x N_p x D` tensor of expert prompt tokens
//! per prompted layer. [`vpt_forward`] is the K = 1 baseline: deep mode
//! injects a fresh prompt block at every prompted layer and discards the
//! transformed prompt rows; shallow mode injects once at the first prompted
//! layer and lets the rows propagate through the remaining layers.

use crate::backbone::{trans_layer, ExpertBackbone, ExpertVars, WeightArchive};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::{Error, Result};

/// Layout of a prompt bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    /// Number of experts sharing the bank.
    pub num_experts: usize,
    /// Prompt tokens per expert per layer.
    pub prompts_per_expert: usize,
    /// Token dimension.
    pub embed_dim: usize,
    /// Sorted layer indices that receive fresh prompt tokens.
    pub prompted_layers: Vec<usize>,
}

impl PromptSpec {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.prompted_layers.is_empty() {
            return Err(Error::Config("prompted_layers must be non-empty".into()));
        }
        if self.prompted_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "prompted_layers must be strictly increasing".into(),
            ));
        }
        if *self.prompted_layers.last().unwrap() >= num_layers {
            return Err(Error::Config(format!(
                "prompted layer {} out of {} layers",
                self.prompted_layers.last().unwrap(),
                num_layers
            )));
        }
        if self.num_experts == 0 || self.embed_dim == 0 {
            return Err(Error::Config("zero-sized prompt bank".into()));
        }
        // prompts_per_expert = 0 is the degenerate promptless case.
        Ok(())
    }
}

/// Expert prompt tokens for every prompted layer, all trainable.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub spec: PromptSpec,
    /// One `K x N_p x D` tensor per entry of `spec.prompted_layers`.
    pub tokens: Vec<Tensor>,
}

impl PromptBank {
    /// The bank tensor for a prompted layer index, if that layer is prompted.
    pub fn bank_for_layer(&self, layer: usize) -> Option<&Tensor> {
        self.spec
            .prompted_layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| &self.tokens[i])
    }

    /// First (smallest) prompted layer.
    pub fn first_prompted_layer(&self) -> usize {
        self.spec.prompted_layers[0]
    }

    /// Archive entries named `prompt.layer{l}.expert{k}`.
    pub fn push_to_archive(&self, archive: &mut WeightArchive) {
        let spec = &self.spec;
        for (i, &layer) in spec.prompted_layers.iter().enumerate() {
            let bank = &self.tokens[i];
            let block = spec.prompts_per_expert * spec.embed_dim;
            for k in 0..spec.num_experts {
                let slice = bank.data()[k * block..(k + 1) * block].to_vec();
                let t = Tensor::from_vec(slice, &[spec.prompts_per_expert, spec.embed_dim])
                    .expect("static shape");
                archive.push(&format!("prompt.layer{layer}.expert{k}"), t);
            }
        }
    }

    pub fn from_archive(archive: &WeightArchive, spec: &PromptSpec) -> Result<PromptBank> {
        let mut tokens = Vec::with_capacity(spec.prompted_layers.len());
        for &layer in &spec.prompted_layers {
            let mut data =
                Vec::with_capacity(spec.num_experts * spec.prompts_per_expert * spec.embed_dim);
            for k in 0..spec.num_experts {
                let t = archive.tensor(&format!("prompt.layer{layer}.expert{k}"))?;
                if t.shape() != [spec.prompts_per_expert, spec.embed_dim] {
                    return Err(Error::shape(format!(
                        "prompt entry layer {layer} expert {k} has shape {:?}",
                        t.shape()
                    )));
                }
                data.extend_from_slice(t.data());
            }
            tokens.push(
                Tensor::from_vec(
                    data,
                    &[spec.num_experts, spec.prompts_per_expert, spec.embed_dim],
                )?
                .with_grad(),
            );
        }
        Ok(PromptBank {
            spec: spec.clone(),
            tokens,
        })
    }
}

/// Initialize a prompt bank with Xavier-style uniform draws in
/// `[-v, v]`, `v = sqrt(6 / (D + N_p))`. A zero `prompts_per_expert`
/// yields an empty bank (the promptless degenerate case).
pub fn init_prompts(spec: &PromptSpec, rng: &mut Rng) -> PromptBank {
    if spec.prompts_per_expert == 0 {
        return PromptBank {
            spec: spec.clone(),
            tokens: Vec::new(),
        };
    }
    let v = (6.0 / (spec.embed_dim + spec.prompts_per_expert) as f64).sqrt();
    let numel = spec.num_experts * spec.prompts_per_expert * spec.embed_dim;
    let tokens = spec
        .prompted_layers
        .iter()
        .map(|_| {
            let data: Vec<f64> = (0..numel).map(|_| rng.uniform(-v, v)).collect();
            Tensor::from_vec(
                data,
                &[spec.num_experts, spec.prompts_per_expert, spec.embed_dim],
            )
            .expect("static shape")
            .with_grad()
        })
        .collect();
    PromptBank {
        spec: spec.clone(),
        tokens,
    }
}

/// Linear classification head on mean-pooled patch tokens.
#[derive(Debug, Clone)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn new(embed_dim: usize, num_classes: usize, rng: &mut Rng) -> Head {
        let data: Vec<f64> = (0..embed_dim * num_classes)
            .map(|_| rng.truncated_normal(0.02))
            .collect();
        Head {
            weight: Tensor::from_vec(data, &[embed_dim, num_classes])
                .expect("static shape")
                .with_grad(),
            bias: Tensor::zeros(&[num_classes]).with_grad(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Logits from mean-pooled patch tokens: `head(mean(tokens))`.
pub fn head_logits(g: &mut Graph, weight: Var, bias: Var, patch_tokens: Var) -> Result<Var> {
    let pooled = g.mean_rows(patch_tokens)?;
    let d = g.value(pooled).numel();
    let row = g.reshape(pooled, &[1, d])?;
    let logits = g.matmul(row, weight)?;
    let logits = g.add_row_broadcast(logits, bias)?;
    let c = g.value(logits).cols();
    g.reshape(logits, &[c])
}

/// Single-expert prompt-tuning baseline.
#[derive(Debug, Clone)]
pub struct VptModel {
    pub backbone: ExpertBackbone,
    pub prompts: PromptBank,
    pub head: Head,
}

impl VptModel {
    pub fn new(backbone: ExpertBackbone, prompts: PromptBank, head: Head) -> Result<VptModel> {
        if prompts.spec.num_experts != 1 {
            return Err(Error::Config(format!(
                "VPT model requires exactly one expert, got {}",
                prompts.spec.num_experts
            )));
        }
        prompts
            .spec
            .validate(backbone.config().num_layers)?;
        Ok(VptModel {
            backbone,
            prompts,
            head,
        })
    }

    /// Trainable tensors: prompt banks then head weights.
    pub fn trainable_parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.prompts.tokens.iter().collect();
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }
}

/// Graph bindings for a VPT forward pass.
pub struct VptVars {
    pub expert: ExpertVars,
    pub banks: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl VptVars {
    pub fn bind(g: &mut Graph, model: &VptModel) -> VptVars {
        VptVars {
            expert: ExpertVars::bind(g, &model.backbone),
            banks: model.prompts.tokens.iter().map(|t| g.leaf(t.clone())).collect(),
            head_weight: g.leaf(model.head.weight.clone()),
            head_bias: g.leaf(model.head.bias.clone()),
        }
    }
}

/// VPT forward pass. Deep mode replaces the first `N_p` rows with fresh
/// prompts at every prompted layer; transformed prompt rows never reach
/// the head. The head consumes mean-pooled patch tokens only.
pub fn vpt_forward_on_graph(
    g: &mut Graph,
    model: &VptModel,
    vars: &VptVars,
    image: &Tensor,
    deep: bool,
) -> Result<Var> {
    let np = model.prompts.spec.prompts_per_expert;
    let nz = model.backbone.config().num_patches();
    let num_layers = model.backbone.config().num_layers;
    let first = model.prompts.first_prompted_layer();

    let mut patches = g.leaf(model.backbone.patchify(image)?);
    if np == 0 {
        // degenerate promptless model: plain backbone forward
        for layer in 0..num_layers {
            patches = trans_layer(g, &vars.expert, layer, patches)?;
        }
        return head_logits(g, vars.head_weight, vars.head_bias, patches);
    }
    let mut prompt_rows: Option<Var> = None;
    for layer in 0..num_layers {
        let prompted = model
            .prompts
            .spec
            .prompted_layers
            .iter()
            .any(|&l| l == layer);
        let inject = if deep { prompted } else { layer == first };
        let input = if inject {
            let idx = model
                .prompts
                .spec
                .prompted_layers
                .iter()
                .position(|&l| l == layer)
                .expect("inject implies prompted layer");
            let bank = vars.banks[idx];
            let block = g.slice_bank(bank, 0)?;
            g.concat_rows(&[block, patches])?
        } else {
            match prompt_rows {
                Some(rows) => g.concat_rows(&[rows, patches])?,
                None => patches,
            }
        };
        let out = trans_layer(g, &vars.expert, layer, input)?;
        let has_prompt_rows = inject || prompt_rows.is_some();
        if has_prompt_rows {
            prompt_rows = Some(g.slice_rows(out, 0, np)?);
            patches = g.slice_rows(out, np, nz)?;
        } else {
            patches = out;
        }
    }
    head_logits(g, vars.head_weight, vars.head_bias, patches)
}

/// Convenience wrapper building a throwaway graph.
pub fn vpt_forward(model: &VptModel, image: &Tensor, deep: bool) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = VptVars::bind(&mut g, model);
    let logits = vpt_forward_on_graph(&mut g, model, &vars, image, deep)?;
    Ok(g.value(logits).clone())
}
