//! The assembled multi-expert model.
//!
//! K frozen experts run in parallel streams. At every prompted layer each
//! expert's stream gets integrated prompt tokens (dispatcher fusion in the
//! full mode, its own bank otherwise) prepended to its patch tokens, runs
//! its own transformer layer, and splits the output back into accumulated
//! prompt rows and patch rows. Unprompted layers carry prompt rows through
//! as ordinary tokens. After the last layer the experts' patch tokens are
//! averaged elementwise and a linear head reads the token-mean.

use crate::backbone::{
    config_from_text, config_to_text, make_synthetic_expert, trans_layer, BackboneConfig,
    ExpertBackbone, ExpertVars, WeightArchive,
};
use crate::dispatch::{
    dispatch_weights, fuse_tokens, moe_dispatch, DispatchTrace, DispatcherLayer,
    DispatcherLayerVars, MoeDispatcher, MoeDispatcherVars,
};
use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::prompting::{head_logits, init_prompts, Head, PromptBank, PromptSpec};
use crate::{Error, Result};

/// Which dispatcher backs the prompted layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispatcherKind {
    Plain,
    /// MoE-MLP dispatcher with this many dispatching experts.
    Moe(usize),
}

/// Forward-pass variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Full model: dispatcher fusion at every prompted layer.
    Pmoe,
    /// Single-expert deep prompting (requires K = 1).
    VptDeep,
    /// Single-expert shallow prompting (requires K = 1, one prompted layer).
    VptShallow,
    /// Per-expert prompts without fusion; outputs still averaged.
    EptsNoDispatch,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Pmoe => "pmoe",
            Mode::VptDeep => "vpt_deep",
            Mode::VptShallow => "vpt_shallow",
            Mode::EptsNoDispatch => "epts_no_dispatch",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "pmoe" => Ok(Mode::Pmoe),
            "vpt_deep" => Ok(Mode::VptDeep),
            "vpt_shallow" => Ok(Mode::VptShallow),
            "epts_no_dispatch" => Ok(Mode::EptsNoDispatch),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

/// Everything needed to build a [`PMoEModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub num_experts: usize,
    pub prompts_per_expert: usize,
    pub prompted_layers: Vec<usize>,
    pub dispatcher: DispatcherKind,
    pub mode: Mode,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.prompt_spec().validate(self.backbone.num_layers)?;
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        match self.mode {
            Mode::VptDeep | Mode::VptShallow if self.num_experts != 1 => {
                return Err(Error::Config(format!(
                    "mode {} requires exactly one expert, got {}",
                    self.mode.as_str(),
                    self.num_experts
                )));
            }
            Mode::VptShallow if self.prompted_layers.len() != 1 => {
                return Err(Error::Config(
                    "vpt_shallow injects prompts at a single layer".into(),
                ));
            }
            _ => {}
        }
        if let DispatcherKind::Moe(e) = self.dispatcher {
            if e == 0 {
                return Err(Error::Config("moe dispatcher needs at least one expert".into()));
            }
        }
        Ok(())
    }

    pub fn prompt_spec(&self) -> PromptSpec {
        PromptSpec {
            num_experts: self.num_experts,
            prompts_per_expert: self.prompts_per_expert,
            embed_dim: self.backbone.embed_dim,
            prompted_layers: self.prompted_layers.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let dispatcher = match self.dispatcher {
            DispatcherKind::Plain => "plain".to_string(),
            DispatcherKind::Moe(e) => format!("moe:{e}"),
        };
        let layers: Vec<String> = self.prompted_layers.iter().map(|l| l.to_string()).collect();
        format!(
            "{}mode = {}\nnum_experts = {}\nprompts_per_expert = {}\nprompted_layers = {}\ndispatcher = {}\nnum_classes = {}\n",
            config_to_text(&self.backbone),
            self.mode.as_str(),
            self.num_experts,
            self.prompts_per_expert,
            layers.join(","),
            dispatcher,
            self.num_classes,
        )
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let backbone = config_from_text(text)?;
        let mut mode = None;
        let mut num_experts = None;
        let mut prompts_per_expert = None;
        let mut prompted_layers = None;
        let mut dispatcher = None;
        let mut num_classes = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("malformed config line: {line}")));
            };
            let (key, value) = (key.trim(), value.trim());
            match key {
                "mode" => mode = Some(Mode::parse(value)?),
                "num_experts" => num_experts = Some(parse_usize(key, value)?),
                "prompts_per_expert" => prompts_per_expert = Some(parse_usize(key, value)?),
                "prompted_layers" => prompted_layers = Some(parse_layer_list(value)?),
                "dispatcher" => dispatcher = Some(parse_dispatcher(value)?),
                "num_classes" => num_classes = Some(parse_usize(key, value)?),
                _ => {} // backbone keys handled above; the CLI layer rejects unknowns
            }
        }
        let missing = |k: &str| Error::Config(format!("missing config key: {k}"));
        let config = ModelConfig {
            backbone,
            num_experts: num_experts.ok_or_else(|| missing("num_experts"))?,
            prompts_per_expert: prompts_per_expert.ok_or_else(|| missing("prompts_per_expert"))?,
            prompted_layers: prompted_layers.ok_or_else(|| missing("prompted_layers"))?,
            dispatcher: dispatcher.ok_or_else(|| missing("dispatcher"))?,
            mode: mode.ok_or_else(|| missing("mode"))?,
            num_classes: num_classes.ok_or_else(|| missing("num_classes"))?,
        };
        config.validate()?;
        Ok(config)
    }
}

pub(crate) fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad integer for {key}: {value:?}")))
}

pub(crate) fn parse_layer_list(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad layer index {s:?}")))
        })
        .collect()
}

pub(crate) fn parse_dispatcher(value: &str) -> Result<DispatcherKind> {
    if value == "plain" {
        return Ok(DispatcherKind::Plain);
    }
    if let Some(e) = value.strip_prefix("moe:") {
        return Ok(DispatcherKind::Moe(parse_usize("dispatcher", e)?));
    }
    Err(Error::Config(format!(
        "dispatcher must be \"plain\" or \"moe:<count>\", got {value:?}"
    )))
}

/// Dispatchers for every prompted layer, present only in the full mode.
#[derive(Debug, Clone)]
pub enum DispatcherStack {
    Plain(Vec<DispatcherLayer>),
    Moe(Vec<MoeDispatcher>),
}

impl DispatcherStack {
    fn parameters(&self) -> Vec<&Tensor> {
        match self {
            DispatcherStack::Plain(layers) => {
                layers.iter().flat_map(|l| l.parameters()).collect()
            }
            DispatcherStack::Moe(layers) => layers.iter().flat_map(|l| l.parameters()).collect(),
        }
    }
}

/// K frozen experts, a prompt bank, per-layer dispatchers, and a head.
#[derive(Debug, Clone)]
pub struct PMoEModel {
    pub config: ModelConfig,
    pub experts: Vec<ExpertBackbone>,
    pub prompts: PromptBank,
    pub dispatchers: Option<DispatcherStack>,
    pub head: Head,
    pub trace_enabled: bool,
}

impl PMoEModel {
    /// Build a model with synthetic experts derived from `rng`.
    pub fn new(config: &ModelConfig, rng: &Rng) -> Result<PMoEModel> {
        let experts = (0..config.num_experts)
            .map(|k| make_synthetic_expert(&config.backbone, &mut rng.derive(0x100 + k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::with_experts(config, experts, rng)
    }

    /// Build a model whose experts come from explicit generator seeds.
    pub fn with_expert_seeds(config: &ModelConfig, seeds: &[u64], rng: &Rng) -> Result<PMoEModel> {
        if seeds.len() != config.num_experts {
            return Err(Error::Config(format!(
                "{} expert seeds for {} experts",
                seeds.len(),
                config.num_experts
            )));
        }
        let experts = seeds
            .iter()
            .map(|&s| make_synthetic_expert(&config.backbone, &mut Rng::new(s)))
            .collect::<Result<Vec<_>>>()?;
        Self::with_experts(config, experts, rng)
    }

    /// Build a model around pre-made experts (they must share the config).
    pub fn with_experts(
        config: &ModelConfig,
        experts: Vec<ExpertBackbone>,
        rng: &Rng,
    ) -> Result<PMoEModel> {
        config.validate()?;
        if experts.len() != config.num_experts {
            return Err(Error::Config(format!(
                "{} experts supplied, config says {}",
                experts.len(),
                config.num_experts
            )));
        }
        for e in &experts {
            if e.config() != &config.backbone {
                return Err(Error::Config(
                    "expert backbone config differs from model config".into(),
                ));
            }
        }
        let prompts = init_prompts(&config.prompt_spec(), &mut rng.derive(0x200));
        let dispatchers = match config.mode {
            Mode::Pmoe => Some(Self::init_dispatchers(config, &mut rng.derive(0x300))),
            _ => None,
        };
        let head = Head::new(
            config.backbone.embed_dim,
            config.num_classes,
            &mut rng.derive(0x400),
        );
        Ok(PMoEModel {
            config: config.clone(),
            experts,
            prompts,
            dispatchers,
            head,
            trace_enabled: false,
        })
    }

    fn init_dispatchers(config: &ModelConfig, rng: &mut Rng) -> DispatcherStack {
        let d = config.backbone.embed_dim;
        let k = config.num_experts;
        match config.dispatcher {
            DispatcherKind::Plain => DispatcherStack::Plain(
                config
                    .prompted_layers
                    .iter()
                    .map(|_| DispatcherLayer::init(d, k, rng))
                    .collect(),
            ),
            DispatcherKind::Moe(e) => DispatcherStack::Moe(
                config
                    .prompted_layers
                    .iter()
                    .map(|_| MoeDispatcher::init(d, k, e, rng))
                    .collect(),
            ),
        }
    }

    /// Trainable tensors in canonical order: prompt banks by prompted layer,
    /// dispatcher weights by prompted layer, then the head.
    pub fn trainable_parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.prompts.tokens.iter().collect();
        if let Some(stack) = &self.dispatchers {
            out.extend(stack.parameters());
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    /// Mutable view in the same canonical order as [`Self::trainable_parameters`].
    pub fn trainable_parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.prompts.tokens.iter_mut().collect();
        if let Some(stack) = &mut self.dispatchers {
            match stack {
                DispatcherStack::Plain(layers) => {
                    for l in layers {
                        out.push(&mut l.w1);
                        out.push(&mut l.b1);
                        out.push(&mut l.w2);
                        out.push(&mut l.b2);
                    }
                }
                DispatcherStack::Moe(layers) => {
                    for l in layers {
                        for e in &mut l.experts {
                            out.push(&mut e.w1);
                            out.push(&mut e.b1);
                            out.push(&mut e.w2);
                            out.push(&mut e.b2);
                        }
                        out.push(&mut l.router_w);
                        out.push(&mut l.router_b);
                    }
                }
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_parameters().iter().map(|t| t.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.experts
            .iter()
            .map(|e| e.weight_views().iter().map(|(_, t)| t.numel()).sum::<usize>())
            .sum()
    }

    /// `(frozen + trainable) / frozen`, the "1.0NX" convention.
    pub fn parameter_overhead_ratio(&self) -> f64 {
        overhead_ratio(self.frozen_count(), self.trainable_count())
    }

    /// Combined fingerprint of all expert weights.
    pub fn backbone_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for e in &self.experts {
            h ^= e.fingerprint();
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }

    /// Bind every tensor into the graph. Trainable leaves keep their
    /// `requires_grad` flag; expert weights bind frozen.
    pub fn bind(&self, g: &mut Graph) -> ModelVars {
        let experts = self.experts.iter().map(|e| ExpertVars::bind(g, e)).collect();
        let banks: Vec<Var> = self.prompts.tokens.iter().map(|t| g.leaf(t.clone())).collect();
        let dispatchers = self.dispatchers.as_ref().map(|stack| match stack {
            DispatcherStack::Plain(layers) => DispatcherVarsStack::Plain(
                layers.iter().map(|l| DispatcherLayerVars::bind(g, l)).collect(),
            ),
            DispatcherStack::Moe(layers) => DispatcherVarsStack::Moe(
                layers.iter().map(|l| MoeDispatcherVars::bind(g, l)).collect(),
            ),
        });
        let head_weight = g.leaf(self.head.weight.clone());
        let head_bias = g.leaf(self.head.bias.clone());

        let mut trainable = banks.clone();
        if let Some(stack) = &dispatchers {
            match stack {
                DispatcherVarsStack::Plain(layers) => {
                    for l in layers {
                        trainable.extend([l.w1, l.b1, l.w2, l.b2]);
                    }
                }
                DispatcherVarsStack::Moe(layers) => {
                    for l in layers {
                        for e in &l.experts {
                            trainable.extend([e.w1, e.b1, e.w2, e.b2]);
                        }
                        trainable.extend([l.router_w, l.router_b]);
                    }
                }
            }
        }
        trainable.extend([head_weight, head_bias]);

        ModelVars {
            experts,
            banks,
            dispatchers,
            head_weight,
            head_bias,
            trainable,
        }
    }

    /// Forward pass on an existing graph.
    pub fn build_logits(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        image: &Tensor,
        mut trace: Option<&mut DispatchTrace>,
    ) -> Result<Var> {
        let c = &self.config;
        let np = c.prompts_per_expert;
        let nz = c.backbone.num_patches();
        let k_count = c.num_experts;

        let mut patches: Vec<Var> = Vec::with_capacity(k_count);
        for e in &self.experts {
            patches.push(g.leaf(e.patchify(image)?));
        }
        let mut accum: Vec<Option<Var>> = vec![None; k_count];

        for layer in 0..c.backbone.num_layers {
            let bank_idx = c.prompted_layers.iter().position(|&l| l == layer);
            let inject = np > 0 && bank_idx.is_some();
            for k in 0..k_count {
                let input = if inject {
                    let bank = vars.banks[bank_idx.expect("inject implies prompted")];
                    let epts_k = g.slice_bank(bank, k)?;
                    let ipt = match c.mode {
                        Mode::Pmoe => {
                            let weights = match vars
                                .dispatchers
                                .as_ref()
                                .expect("pmoe mode binds dispatchers")
                            {
                                DispatcherVarsStack::Plain(layers) => dispatch_weights(
                                    g,
                                    &layers[bank_idx.unwrap()],
                                    epts_k,
                                    accum[k],
                                    patches[k],
                                )?,
                                DispatcherVarsStack::Moe(layers) => moe_dispatch(
                                    g,
                                    &layers[bank_idx.unwrap()],
                                    epts_k,
                                    accum[k],
                                    patches[k],
                                )?,
                            };
                            if let Some(t) = trace.as_deref_mut() {
                                t.record(g.value(weights), layer, k);
                            }
                            fuse_tokens(g, weights, bank)?
                        }
                        _ => epts_k,
                    };
                    g.concat_rows(&[ipt, patches[k]])?
                } else {
                    match accum[k] {
                        Some(rows) => g.concat_rows(&[rows, patches[k]])?,
                        None => patches[k],
                    }
                };
                let out = trans_layer(g, &vars.experts[k], layer, input)?;
                if inject || accum[k].is_some() {
                    accum[k] = Some(g.slice_rows(out, 0, np)?);
                    patches[k] = g.slice_rows(out, np, nz)?;
                } else {
                    patches[k] = out;
                }
            }
        }

        // elementwise average over experts
        let mut combined = patches[0];
        for &p in &patches[1..] {
            combined = g.add(combined, p)?;
        }
        if k_count > 1 {
            combined = g.scale(combined, 1.0 / k_count as f64);
        }
        head_logits(g, vars.head_weight, vars.head_bias, combined)
    }

    /// Bind a model but substitute externally supplied vars for the
    /// trainable leaves, in canonical parameter order. The gradient checker
    /// uses this to evaluate the same forward at perturbed parameters.
    pub fn bind_with_params(&self, g: &mut Graph, external: &[Var]) -> ModelVars {
        let experts = self.experts.iter().map(|e| ExpertVars::bind(g, e)).collect();
        let mut it = external.iter().copied();
        let banks: Vec<Var> = self.prompts.tokens.iter().map(|_| it.next().expect("bank var")).collect();
        let dispatchers = self.dispatchers.as_ref().map(|stack| match stack {
            DispatcherStack::Plain(layers) => DispatcherVarsStack::Plain(
                layers
                    .iter()
                    .map(|_| DispatcherLayerVars {
                        w1: it.next().expect("w1"),
                        b1: it.next().expect("b1"),
                        w2: it.next().expect("w2"),
                        b2: it.next().expect("b2"),
                    })
                    .collect(),
            ),
            DispatcherStack::Moe(layers) => DispatcherVarsStack::Moe(
                layers
                    .iter()
                    .map(|l| MoeDispatcherVars {
                        experts: l
                            .experts
                            .iter()
                            .map(|_| DispatcherLayerVars {
                                w1: it.next().expect("w1"),
                                b1: it.next().expect("b1"),
                                w2: it.next().expect("w2"),
                                b2: it.next().expect("b2"),
                            })
                            .collect(),
                        router_w: it.next().expect("router_w"),
                        router_b: it.next().expect("router_b"),
                    })
                    .collect(),
            ),
        });
        let head_weight = it.next().expect("head weight");
        let head_bias = it.next().expect("head bias");
        assert!(it.next().is_none(), "too many external parameter vars");
        ModelVars {
            experts,
            banks,
            dispatchers,
            head_weight,
            head_bias,
            trainable: external.to_vec(),
        }
    }

    /// Forward pass returning logits and, when enabled, the dispatch trace.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, Option<DispatchTrace>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let mut trace = if self.trace_enabled && self.config.mode == Mode::Pmoe {
            Some(DispatchTrace::new())
        } else {
            None
        };
        let logits = self.build_logits(&mut g, &vars, image, trace.as_mut())?;
        Ok((g.value(logits).clone(), trace))
    }

    /// Per-sample loss built on an existing graph.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        image: &Tensor,
        label: usize,
    ) -> Result<Var> {
        Ok(self.build_loss_and_logits(g, vars, image, label)?.0)
    }

    /// Per-sample loss plus the logits var from the same forward.
    pub fn build_loss_and_logits(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        image: &Tensor,
        label: usize,
    ) -> Result<(Var, Var)> {
        let logits = self.build_logits(g, vars, image, None)?;
        let c = g.value(logits).numel();
        let row = g.reshape(logits, &[1, c])?;
        let loss = g.cross_entropy(row, &[label])?;
        Ok((loss, logits))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<PMoEModel> {
        Self::from_archive(&WeightArchive::read(path)?)
    }

    pub fn to_archive(&self) -> WeightArchive {
        let mut archive = WeightArchive::new();
        archive.push_text("config", &self.config.to_text());
        for (k, e) in self.experts.iter().enumerate() {
            for (name, t) in e.weight_views() {
                archive.push(&format!("expert{k}.{name}"), t.clone());
            }
        }
        self.prompts.push_to_archive(&mut archive);
        if let Some(stack) = &self.dispatchers {
            match stack {
                DispatcherStack::Plain(layers) => {
                    for (i, l) in layers.iter().enumerate() {
                        let lid = self.config.prompted_layers[i];
                        archive.push(&format!("dispatcher.layer{lid}.w1"), l.w1.clone());
                        archive.push(&format!("dispatcher.layer{lid}.b1"), l.b1.clone());
                        archive.push(&format!("dispatcher.layer{lid}.w2"), l.w2.clone());
                        archive.push(&format!("dispatcher.layer{lid}.b2"), l.b2.clone());
                    }
                }
                DispatcherStack::Moe(layers) => {
                    for (i, l) in layers.iter().enumerate() {
                        let lid = self.config.prompted_layers[i];
                        for (e, ex) in l.experts.iter().enumerate() {
                            let p = format!("dispatcher.layer{lid}.expert{e}");
                            archive.push(&format!("{p}.w1"), ex.w1.clone());
                            archive.push(&format!("{p}.b1"), ex.b1.clone());
                            archive.push(&format!("{p}.w2"), ex.w2.clone());
                            archive.push(&format!("{p}.b2"), ex.b2.clone());
                        }
                        archive.push(&format!("dispatcher.layer{lid}.router.w"), l.router_w.clone());
                        archive.push(&format!("dispatcher.layer{lid}.router.b"), l.router_b.clone());
                    }
                }
            }
        }
        archive.push("head.weight", self.head.weight.clone());
        archive.push("head.bias", self.head.bias.clone());
        archive
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<PMoEModel> {
        let config = ModelConfig::from_text(&archive.text("config")?)?;
        let mut experts = Vec::with_capacity(config.num_experts);
        for k in 0..config.num_experts {
            // strip the expert prefix into a per-expert archive view
            let mut sub = WeightArchive::new();
            sub.push_text("config", &config_to_text(&config.backbone));
            let prefix = format!("expert{k}.");
            for name in archive.names() {
                if let Some(rest) = name.strip_prefix(&prefix) {
                    sub.push(rest, archive.tensor(name)?.clone());
                }
            }
            experts.push(ExpertBackbone::from_archive(&sub)?);
        }
        let prompts = PromptBank::from_archive(archive, &config.prompt_spec())?;
        let dispatchers = match config.mode {
            Mode::Pmoe => Some(match config.dispatcher {
                DispatcherKind::Plain => {
                    let mut layers = Vec::new();
                    for &lid in &config.prompted_layers {
                        layers.push(DispatcherLayer {
                            w1: archive.tensor(&format!("dispatcher.layer{lid}.w1"))?.clone().with_grad(),
                            b1: archive.tensor(&format!("dispatcher.layer{lid}.b1"))?.clone().with_grad(),
                            w2: archive.tensor(&format!("dispatcher.layer{lid}.w2"))?.clone().with_grad(),
                            b2: archive.tensor(&format!("dispatcher.layer{lid}.b2"))?.clone().with_grad(),
                        });
                    }
                    DispatcherStack::Plain(layers)
                }
                DispatcherKind::Moe(e_count) => {
                    let mut layers = Vec::new();
                    for &lid in &config.prompted_layers {
                        let mut experts = Vec::new();
                        for e in 0..e_count {
                            let p = format!("dispatcher.layer{lid}.expert{e}");
                            experts.push(DispatcherLayer {
                                w1: archive.tensor(&format!("{p}.w1"))?.clone().with_grad(),
                                b1: archive.tensor(&format!("{p}.b1"))?.clone().with_grad(),
                                w2: archive.tensor(&format!("{p}.w2"))?.clone().with_grad(),
                                b2: archive.tensor(&format!("{p}.b2"))?.clone().with_grad(),
                            });
                        }
                        layers.push(MoeDispatcher {
                            experts,
                            router_w: archive
                                .tensor(&format!("dispatcher.layer{lid}.router.w"))?
                                .clone()
                                .with_grad(),
                            router_b: archive
                                .tensor(&format!("dispatcher.layer{lid}.router.b"))?
                                .clone()
                                .with_grad(),
                        });
                    }
                    DispatcherStack::Moe(layers)
                }
            }),
            _ => None,
        };
        Ok(PMoEModel {
            config: config.clone(),
            experts,
            prompts,
            dispatchers,
            head: Head {
                weight: archive.tensor("head.weight")?.clone().with_grad(),
                bias: archive.tensor("head.bias")?.clone().with_grad(),
            },
            trace_enabled: false,
        })
    }
}

/// `(frozen + trainable) / frozen`.
pub fn overhead_ratio(frozen: usize, trainable: usize) -> f64 {
    (frozen + trainable) as f64 / frozen as f64
}

/// Elementwise average of congruent expert outputs.
pub fn combine_experts(outputs: &[Tensor]) -> Result<Tensor> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::shape("combine_experts of zero outputs"))?;
    let mut acc = first.clone();
    for t in &outputs[1..] {
        acc = acc.add(t)?;
    }
    Ok(acc.scale(1.0 / outputs.len() as f64))
}

/// Graph bindings for a full model.
pub struct ModelVars {
    pub experts: Vec<ExpertVars>,
    pub banks: Vec<Var>,
    pub dispatchers: Option<DispatcherVarsStack>,
    pub head_weight: Var,
    pub head_bias: Var,
    /// Trainable vars in the canonical parameter order.
    pub trainable: Vec<Var>,
}

pub enum DispatcherVarsStack {
    Plain(Vec<DispatcherLayerVars>),
    Moe(Vec<MoeDispatcherVars>),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{vpt_forward, VptModel};

    pub(crate) fn toy_backbone() -> BackboneConfig {
        BackboneConfig {
            image_h: 32,
            image_w: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 2.0,
            eps: 1e-6,
        }
    }

    fn toy_config(k: usize, mode: Mode) -> ModelConfig {
        ModelConfig {
            backbone: toy_backbone(),
            num_experts: k,
            prompts_per_expert: 4,
            prompted_layers: (0..4).collect(),
            dispatcher: DispatcherKind::Plain,
            mode,
            num_classes: 4,
        }
    }

    fn random_like(t: &Tensor, rng: &mut Rng) -> Tensor {
        Tensor::from_vec(
            (0..t.numel()).map(|_| rng.uniform(-2.0, 2.0)).collect(),
            t.shape(),
        )
        .unwrap()
    }

    fn random_image(rng: &mut Rng) -> Tensor {
        let c = toy_backbone();
        let n = c.image_h * c.image_w * c.channels;
        Tensor::from_vec((0..n).map(|_| rng.uniform01()).collect(), &[c.image_h, c.image_w, c.channels])
            .unwrap()
    }

    #[test]
    fn mode_consistency_is_validated() {
        let mut c = toy_config(2, Mode::VptDeep);
        assert!(c.validate().is_err());
        c.num_experts = 1;
        assert!(c.validate().is_ok());
        let mut c = toy_config(1, Mode::VptShallow);
        assert!(c.validate().is_err()); // four prompted layers
        c.prompted_layers = vec![0];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn trainable_count_matches_closed_form() {
        // prompts 4*(2*4*32) + dispatcher 4*((32*32+32)+(32*2+2)) + head (32*4+4)
        let model = PMoEModel::new(&toy_config(2, Mode::Pmoe), &Rng::new(1)).unwrap();
        assert_eq!(model.trainable_count(), 1024 + 4488 + 132);
        assert_eq!(model.trainable_count(), 5644);

        // epts_no_dispatch drops the dispatcher
        let model = PMoEModel::new(&toy_config(2, Mode::EptsNoDispatch), &Rng::new(1)).unwrap();
        assert_eq!(model.trainable_count(), 1024 + 132);

        // every trainable tensor requires grad; backbone weights do not
        let model = PMoEModel::new(&toy_config(2, Mode::Pmoe), &Rng::new(1)).unwrap();
        assert!(model.trainable_parameters().iter().all(|t| t.requires_grad()));
        assert!(model.experts.iter().all(|e| e.frozen()));
    }

    #[test]
    fn overhead_ratio_cases() {
        assert_eq!(overhead_ratio(100, 0), 1.0);
        let model = PMoEModel::new(&toy_config(2, Mode::Pmoe), &Rng::new(2)).unwrap();
        let expected = 1.0 + 5644.0 / model.frozen_count() as f64;
        assert!((model.parameter_overhead_ratio() - expected).abs() < 1e-15);
    }

    #[test]
    fn combine_experts_cases() {
        let a = Tensor::from_vec(vec![2.0], &[1, 1]).unwrap();
        let b = Tensor::from_vec(vec![4.0], &[1, 1]).unwrap();
        assert_eq!(combine_experts(&[a.clone(), b]).unwrap().data(), &[3.0]);
        assert_eq!(combine_experts(&[a.clone()]).unwrap().data(), a.data());
        let neg = a.scale(-1.0);
        assert_eq!(combine_experts(&[a, neg]).unwrap().data(), &[0.0]);
        assert!(combine_experts(&[]).is_err());
    }

    #[test]
    fn k1_pmoe_equals_vpt_deep() {
        let config = toy_config(1, Mode::Pmoe);
        let rng = Rng::new(7);
        let model = PMoEModel::new(&config, &rng).unwrap();
        let image = random_image(&mut Rng::new(8));
        let (logits, _) = model.forward(&image).unwrap();

        let vpt = VptModel::new(
            model.experts[0].clone(),
            model.prompts.clone(),
            model.head.clone(),
        )
        .unwrap();
        let expected = vpt_forward(&vpt, &image, true).unwrap();
        for (a, b) in logits.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn identical_experts_and_banks_collapse_to_k1() {
        let config = toy_config(2, Mode::Pmoe);
        let rng = Rng::new(9);
        let mut model = PMoEModel::new(&config, &rng).unwrap();
        // both experts identical, both bank halves identical
        model.experts[1] = model.experts[0].clone();
        for bank in &mut model.prompts.tokens {
            let half = bank.data()[..bank.numel() / 2].to_vec();
            let mut data = half.clone();
            data.extend_from_slice(&half);
            *bank = Tensor::from_vec(data, bank.shape()).unwrap().with_grad();
        }
        let image = random_image(&mut Rng::new(10));
        let (logits, _) = model.forward(&image).unwrap();

        let mut k1_config = config.clone();
        k1_config.num_experts = 1;
        let mut k1 = PMoEModel::new(&k1_config, &rng).unwrap();
        k1.experts[0] = model.experts[0].clone();
        for (dst, src) in k1.prompts.tokens.iter_mut().zip(&model.prompts.tokens) {
            let half = src.data()[..src.numel() / 2].to_vec();
            *dst = Tensor::from_vec(half, dst.shape()).unwrap().with_grad();
        }
        k1.head = model.head.clone();
        let (expected, _) = k1.forward(&image).unwrap();
        for (a, b) in logits.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn shared_epts_give_identical_ipts_across_experts() {
        // identical banks across experts: every expert's IPT equals the
        // shared EPT rows regardless of dispatcher weights, so the pmoe
        // and epts_no_dispatch forwards coincide.
        let config = toy_config(2, Mode::Pmoe);
        let rng = Rng::new(11);
        let mut model = PMoEModel::new(&config, &rng).unwrap();
        for bank in &mut model.prompts.tokens {
            let half = bank.data()[..bank.numel() / 2].to_vec();
            let mut data = half.clone();
            data.extend_from_slice(&half);
            *bank = Tensor::from_vec(data, bank.shape()).unwrap().with_grad();
        }
        // scramble the dispatcher so its weights are far from uniform
        if let Some(DispatcherStack::Plain(layers)) = &mut model.dispatchers {
            let mut noise = Rng::new(12);
            for l in layers {
                l.w2 = random_like(&l.w2, &mut noise).with_grad();
                l.b2 = random_like(&l.b2, &mut noise).with_grad();
            }
        }
        let image = random_image(&mut Rng::new(13));
        let (pmoe_logits, _) = model.forward(&image).unwrap();

        let mut plain = model.clone();
        plain.config.mode = Mode::EptsNoDispatch;
        plain.dispatchers = None;
        let (expected, _) = plain.forward(&image).unwrap();
        for (a, b) in pmoe_logits.data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_deterministic_with_trace() {
        let config = toy_config(2, Mode::Pmoe);
        let mut model = PMoEModel::new(&config, &Rng::new(14)).unwrap();
        model.trace_enabled = true;
        let image = random_image(&mut Rng::new(15));
        let (a, trace_a) = model.forward(&image).unwrap();
        let (b, trace_b) = model.forward(&image).unwrap();
        assert_eq!(a.data(), b.data());
        let (ta, tb) = (trace_a.unwrap(), trace_b.unwrap());
        assert_eq!(ta.records, tb.records);
        // 4 prompted layers x 2 experts x 4 tokens
        assert_eq!(ta.len(), 4 * 2 * 4);
        assert!(ta.records.iter().all(|r| r.weights.len() == 2));
    }

    #[test]
    fn epts_no_dispatch_differs_from_pmoe_in_general() {
        let config = toy_config(2, Mode::Pmoe);
        let mut model = PMoEModel::new(&config, &Rng::new(16)).unwrap();
        // push dispatcher off uniform
        if let Some(DispatcherStack::Plain(layers)) = &mut model.dispatchers {
            let mut noise = Rng::new(17);
            for l in layers {
                l.w2 = random_like(&l.w2, &mut noise).with_grad();
                l.b2 = random_like(&l.b2, &mut noise).with_grad();
            }
        }
        let image = random_image(&mut Rng::new(18));
        let (pmoe_logits, _) = model.forward(&image).unwrap();
        let mut plain = model.clone();
        plain.config.mode = Mode::EptsNoDispatch;
        plain.dispatchers = None;
        let (other, _) = plain.forward(&image).unwrap();
        let diff: f64 = pmoe_logits
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_logits() {
        let config = ModelConfig {
            dispatcher: DispatcherKind::Moe(3),
            ..toy_config(2, Mode::Pmoe)
        };
        let model = PMoEModel::new(&config, &Rng::new(19)).unwrap();
        let image = random_image(&mut Rng::new(20));
        let (before, _) = model.forward(&image).unwrap();

        let path = std::env::temp_dir().join("pmoe_model_roundtrip.pmwa");
        model.save(&path).unwrap();
        let reloaded = PMoEModel::load(&path).unwrap();
        let (after, _) = reloaded.forward(&image).unwrap();
        assert_eq!(before.data(), after.data());
        assert_eq!(model.trainable_count(), reloaded.trainable_count());
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn full_model_grad_check_small() {
        use crate::numerics::grad_check;
        // smaller than the acceptance config so the unit test stays quick
        let config = ModelConfig {
            backbone: BackboneConfig {
                image_h: 8,
                image_w: 8,
                patch_size: 4,
                channels: 1,
                embed_dim: 8,
                num_layers: 2,
                num_heads: 2,
                mlp_ratio: 2.0,
                eps: 1e-6,
            },
            num_experts: 2,
            prompts_per_expert: 2,
            prompted_layers: vec![0, 1],
            dispatcher: DispatcherKind::Plain,
            mode: Mode::Pmoe,
            num_classes: 3,
        };
        let model = PMoEModel::new(&config, &Rng::new(21)).unwrap();
        let mut rng = Rng::new(22);
        let image = Tensor::from_vec((0..64).map(|_| rng.uniform01()).collect(), &[8, 8, 1]).unwrap();
        let params: Vec<Tensor> = model
            .trainable_parameters()
            .into_iter()
            .cloned()
            .collect();
        let report = grad_check(
            |g, vars| {
                let mvars = model.bind_with_params(g, vars);
                model.build_loss(g, &mvars, &image, 1)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
