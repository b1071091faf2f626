//! Frozen transformer experts: a patchifier plus a stack of pre-norm
//! transformer layers, generated synthetically and kept immutable after
//! construction. Gradients never reach backbone weights; their graph leaves
//! are bound without `requires_grad`.

mod archive;

pub use archive::WeightArchive;

use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::{Error, Result};

/// Geometry and sizing of one expert backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub eps: f64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0
        {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config("zero-sized backbone dimension".into()));
        }
        if self.mlp_ratio <= 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("mlp_ratio and eps must be positive".into()));
        }
        Ok(())
    }

    /// Number of patch tokens.
    pub fn num_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Flattened patch vector length.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Hidden width of the transformer MLP block.
    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }
}

/// Weights of one transformer layer.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub w_up: Tensor,
    pub b_up: Tensor,
    pub w_down: Tensor,
    pub b_down: Tensor,
}

/// One frozen expert: patch projection, positional embeddings, and
/// transformer layers. Immutable after construction.
#[derive(Debug, Clone)]
pub struct ExpertBackbone {
    config: BackboneConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
}

impl ExpertBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// True when no weight tensor requires gradients.
    pub fn frozen(&self) -> bool {
        self.weight_views().iter().all(|(_, t)| !t.requires_grad())
    }

    /// All weights with their archive entry names, in a fixed order.
    pub fn weight_views(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch.weight".into(), &self.patch_weight),
            ("patch.bias".into(), &self.patch_bias),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.ln1.gamma"), &w.ln1_gamma));
            out.push((format!("layer{l}.ln1.beta"), &w.ln1_beta));
            out.push((format!("layer{l}.attn.wq"), &w.wq));
            out.push((format!("layer{l}.attn.bq"), &w.bq));
            out.push((format!("layer{l}.attn.wk"), &w.wk));
            out.push((format!("layer{l}.attn.bk"), &w.bk));
            out.push((format!("layer{l}.attn.wv"), &w.wv));
            out.push((format!("layer{l}.attn.bv"), &w.bv));
            out.push((format!("layer{l}.attn.wo"), &w.wo));
            out.push((format!("layer{l}.attn.bo"), &w.bo));
            out.push((format!("layer{l}.ln2.gamma"), &w.ln2_gamma));
            out.push((format!("layer{l}.ln2.beta"), &w.ln2_beta));
            out.push((format!("layer{l}.mlp.w_up"), &w.w_up));
            out.push((format!("layer{l}.mlp.b_up"), &w.b_up));
            out.push((format!("layer{l}.mlp.w_down"), &w.w_down));
            out.push((format!("layer{l}.mlp.b_down"), &w.b_down));
        }
        out
    }

    /// FNV-1a over all weight bytes; used to assert freezing.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.weight_views() {
            for v in t.data() {
                for b in v.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        h
    }

    /// Extract, embed, and position-tag the image patches.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        if image.shape() != [c.image_h, c.image_w, c.channels] {
            return Err(Error::shape(format!(
                "image shape {:?} does not match config {}x{}x{}",
                image.shape(),
                c.image_h,
                c.image_w,
                c.channels
            )));
        }
        let patches = extract_patches(image, c.patch_size)?;
        let tokens = patches.matmul(&self.patch_weight)?;
        let mut data = tokens.into_data();
        let d = c.embed_dim;
        for row in data.chunks_exact_mut(d) {
            for (v, b) in row.iter_mut().zip(self.patch_bias.data()) {
                *v += b;
            }
        }
        for (v, p) in data.iter_mut().zip(self.pos_embed.data()) {
            *v += p;
        }
        Tensor::from_vec(data, &[c.num_patches(), d])
    }

    /// Run one transformer layer on a plain tensor (builds a throwaway graph).
    pub fn trans_layer_value(&self, layer: usize, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = ExpertVars::bind(&mut g, self);
        let t = g.leaf(tokens.clone());
        let out = trans_layer(&mut g, &vars, layer, t)?;
        Ok(g.value(out).clone())
    }

    /// Patch tokens after all transformer layers, with no prompts involved.
    pub fn forward_patch_tokens(&self, image: &Tensor) -> Result<Tensor> {
        self.forward_patch_tokens_prompted(image, None)
    }

    /// Patch tokens after all layers, optionally with fixed prompt rows
    /// prepended at every layer (deep-prompting discard semantics: the
    /// transformed prompt rows are dropped after each block).
    pub fn forward_patch_tokens_prompted(
        &self,
        image: &Tensor,
        layer_prompts: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        if let Some(ps) = layer_prompts {
            if ps.len() != self.config.num_layers {
                return Err(Error::shape(format!(
                    "{} prompt blocks for {} layers",
                    ps.len(),
                    self.config.num_layers
                )));
            }
        }
        let mut g = Graph::new();
        let vars = ExpertVars::bind(&mut g, self);
        let nz = self.config.num_patches();
        let mut t = g.leaf(self.patchify(image)?);
        for l in 0..self.config.num_layers {
            t = match layer_prompts {
                Some(ps) => {
                    let np = ps[l].shape()[0];
                    let p = g.leaf(ps[l].clone());
                    let joined = g.concat_rows(&[p, t])?;
                    let out = trans_layer(&mut g, &vars, l, joined)?;
                    g.slice_rows(out, np, nz)?
                }
                None => trans_layer(&mut g, &vars, l, t)?,
            };
        }
        Ok(g.value(t).clone())
    }

    pub fn to_archive(&self) -> WeightArchive {
        let mut archive = WeightArchive::new();
        archive.push_text("config", &config_to_text(&self.config));
        for (name, t) in self.weight_views() {
            archive.push(&name, (*t).clone());
        }
        archive
    }

    pub fn from_archive(archive: &WeightArchive) -> Result<Self> {
        let config = config_from_text(&archive.text("config")?)?;
        config.validate()?;
        let get = |name: &str| archive.tensor(name).cloned();
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            layers.push(LayerWeights {
                ln1_gamma: get(&format!("layer{l}.ln1.gamma"))?,
                ln1_beta: get(&format!("layer{l}.ln1.beta"))?,
                wq: get(&format!("layer{l}.attn.wq"))?,
                bq: get(&format!("layer{l}.attn.bq"))?,
                wk: get(&format!("layer{l}.attn.wk"))?,
                bk: get(&format!("layer{l}.attn.bk"))?,
                wv: get(&format!("layer{l}.attn.wv"))?,
                bv: get(&format!("layer{l}.attn.bv"))?,
                wo: get(&format!("layer{l}.attn.wo"))?,
                bo: get(&format!("layer{l}.attn.bo"))?,
                ln2_gamma: get(&format!("layer{l}.ln2.gamma"))?,
                ln2_beta: get(&format!("layer{l}.ln2.beta"))?,
                w_up: get(&format!("layer{l}.mlp.w_up"))?,
                b_up: get(&format!("layer{l}.mlp.b_up"))?,
                w_down: get(&format!("layer{l}.mlp.w_down"))?,
                b_down: get(&format!("layer{l}.mlp.b_down"))?,
            });
        }
        let expert = ExpertBackbone {
            config,
            patch_weight: get("patch.weight")?,
            patch_bias: get("patch.bias")?,
            pos_embed: get("pos_embed")?,
            layers,
        };
        expert.check_shapes()?;
        Ok(expert)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&WeightArchive::read(path)?)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.embed_dim;
        let checks: Vec<(&str, &Tensor, Vec<usize>)> = {
            let mut v: Vec<(&str, &Tensor, Vec<usize>)> = vec![
                ("patch.weight", &self.patch_weight, vec![c.patch_dim(), d]),
                ("patch.bias", &self.patch_bias, vec![d]),
                ("pos_embed", &self.pos_embed, vec![c.num_patches(), d]),
            ];
            for w in &self.layers {
                v.push(("ln1.gamma", &w.ln1_gamma, vec![d]));
                v.push(("wq", &w.wq, vec![d, d]));
                v.push(("wo", &w.wo, vec![d, d]));
                v.push(("w_up", &w.w_up, vec![d, c.mlp_hidden()]));
                v.push(("w_down", &w.w_down, vec![c.mlp_hidden(), d]));
            }
            v
        };
        for (name, t, shape) in checks {
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        if self.layers.len() != c.num_layers {
            return Err(Error::shape(format!(
                "{} layers found, config says {}",
                self.layers.len(),
                c.num_layers
            )));
        }
        Ok(())
    }
}

/// Flatten the image into `[N_z, P*P*C]` patch vectors, grid row-major,
/// each patch flattened in (dy, dx, channel) order.
pub fn extract_patches(image: &Tensor, patch_size: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::shape(format!(
            "expected H x W x C image, got {:?}",
            image.shape()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pd = patch_size * patch_size * c;
    let mut data = Vec::with_capacity(gh * gw * pd);
    for gi in 0..gh {
        for gj in 0..gw {
            for dy in 0..patch_size {
                let row = gi * patch_size + dy;
                let col0 = gj * patch_size;
                let start = (row * w + col0) * c;
                data.extend_from_slice(&image.data()[start..start + patch_size * c]);
            }
        }
    }
    Tensor::from_vec(data, &[gh * gw, pd])
}

/// Graph bindings for one expert's weights; all leaves are frozen.
pub struct ExpertVars {
    pub config: BackboneConfig,
    pub layers: Vec<LayerVars>,
}

pub struct LayerVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w_up: Var,
    pub b_up: Var,
    pub w_down: Var,
    pub b_down: Var,
}

impl ExpertVars {
    pub fn bind(g: &mut Graph, expert: &ExpertBackbone) -> ExpertVars {
        let layers = expert
            .layers
            .iter()
            .map(|w| LayerVars {
                ln1_gamma: g.leaf(w.ln1_gamma.clone()),
                ln1_beta: g.leaf(w.ln1_beta.clone()),
                wq: g.leaf(w.wq.clone()),
                bq: g.leaf(w.bq.clone()),
                wk: g.leaf(w.wk.clone()),
                bk: g.leaf(w.bk.clone()),
                wv: g.leaf(w.wv.clone()),
                bv: g.leaf(w.bv.clone()),
                wo: g.leaf(w.wo.clone()),
                bo: g.leaf(w.bo.clone()),
                ln2_gamma: g.leaf(w.ln2_gamma.clone()),
                ln2_beta: g.leaf(w.ln2_beta.clone()),
                w_up: g.leaf(w.w_up.clone()),
                b_up: g.leaf(w.b_up.clone()),
                w_down: g.leaf(w.w_down.clone()),
                b_down: g.leaf(w.b_down.clone()),
            })
            .collect();
        ExpertVars {
            config: expert.config.clone(),
            layers,
        }
    }
}

/// Pre-norm transformer block: `x + Attn(LN1(x))`, then `h + MLP(LN2(h))`.
/// The caller's row split convention is: the first rows are prompt rows,
/// the rest patch rows; the layer itself treats all rows alike (full
/// non-causal attention).
pub fn trans_layer(g: &mut Graph, vars: &ExpertVars, layer: usize, tokens: Var) -> Result<Var> {
    let c = &vars.config;
    if layer >= vars.layers.len() {
        return Err(Error::index(format!(
            "layer {} out of {}",
            layer,
            vars.layers.len()
        )));
    }
    let d = c.embed_dim;
    if g.value(tokens).rank() != 2 || g.value(tokens).cols() != d {
        return Err(Error::shape(format!(
            "token matrix {:?} does not match embed dim {}",
            g.value(tokens).shape(),
            d
        )));
    }
    let lv = &vars.layers[layer];
    let head_dim = d / c.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let normed = g.layernorm(tokens, lv.ln1_gamma, lv.ln1_beta, c.eps)?;
    let q = g.matmul(normed, lv.wq)?;
    let q = g.add_row_broadcast(q, lv.bq)?;
    let k = g.matmul(normed, lv.wk)?;
    let k = g.add_row_broadcast(k, lv.bk)?;
    let v = g.matmul(normed, lv.wv)?;
    let v = g.add_row_broadcast(v, lv.bv)?;

    let mut head_outputs = Vec::with_capacity(c.num_heads);
    for h in 0..c.num_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax(scores);
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let projected = g.matmul(merged, lv.wo)?;
    let projected = g.add_row_broadcast(projected, lv.bo)?;
    let after_attn = g.add(tokens, projected)?;

    let normed2 = g.layernorm(after_attn, lv.ln2_gamma, lv.ln2_beta, c.eps)?;
    let up = g.matmul(normed2, lv.w_up)?;
    let up = g.add_row_broadcast(up, lv.b_up)?;
    let act = g.gelu(up);
    let down = g.matmul(act, lv.w_down)?;
    let down = g.add_row_broadcast(down, lv.b_down)?;
    g.add(after_attn, down)
}

/// Generate a frozen expert that stands in for a pretrained backbone.
///
/// Projection weights draw from truncated normals at the fan-in scale
/// `1/sqrt(fan_in)` (clipped at two standard deviations) so every
/// attention and MLP path has order-one gain, the way trained transformer
/// weights do; initialization-scale weights (std 0.02) would leave the
/// network unresponsive to prompt tokens. Biases stay small, layernorm
/// affines start at the identity. Deterministic for a given generator state.
pub fn make_synthetic_expert(config: &BackboneConfig, rng: &mut Rng) -> Result<ExpertBackbone> {
    config.validate()?;
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let mut tn = |shape: &[usize], std: f64| -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.truncated_normal(std)).collect();
        Tensor::from_vec(data, shape).expect("static shape")
    };
    let fan = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let patch_weight = tn(&[config.patch_dim(), d], fan(config.patch_dim()));
    let patch_bias = tn(&[d], 0.02);
    let pos_embed = tn(&[config.num_patches(), d], 0.02);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            wq: tn(&[d, d], fan(d)),
            bq: tn(&[d], 0.02),
            wk: tn(&[d, d], fan(d)),
            bk: tn(&[d], 0.02),
            wv: tn(&[d, d], fan(d)),
            bv: tn(&[d], 0.02),
            wo: tn(&[d, d], fan(d)),
            bo: tn(&[d], 0.02),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            w_up: tn(&[d, hidden], fan(d)),
            b_up: tn(&[hidden], 0.02),
            w_down: tn(&[hidden, d], fan(hidden)),
            b_down: tn(&[d], 0.02),
        });
    }
    Ok(ExpertBackbone {
        config: config.clone(),
        patch_weight,
        patch_bias,
        pos_embed,
        layers,
    })
}

pub fn config_to_text(c: &BackboneConfig) -> String {
    format!(
        "image_h = {}\nimage_w = {}\npatch_size = {}\nchannels = {}\nembed_dim = {}\nnum_layers = {}\nnum_heads = {}\nmlp_ratio = {}\neps = {}\n",
        c.image_h, c.image_w, c.patch_size, c.channels, c.embed_dim, c.num_layers, c.num_heads, c.mlp_ratio, c.eps
    )
}

pub fn config_from_text(text: &str) -> Result<BackboneConfig> {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed config line: {line}")))?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |k: &str| -> Result<String> {
        map.get(k)
            .cloned()
            .ok_or_else(|| Error::Config(format!("missing config key: {k}")))
    };
    let usize_of = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("bad integer for {k}")))
    };
    let f64_of = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("bad number for {k}")))
    };
    Ok(BackboneConfig {
        image_h: usize_of("image_h")?,
        image_w: usize_of("image_w")?,
        patch_size: usize_of("patch_size")?,
        channels: usize_of("channels")?,
        embed_dim: usize_of("embed_dim")?,
        num_layers: usize_of("num_layers")?,
        num_heads: usize_of("num_heads")?,
        mlp_ratio: f64_of("mlp_ratio")?,
        eps: f64_of("eps")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> BackboneConfig {
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

    fn random_image(rng: &mut Rng, c: &BackboneConfig) -> Tensor {
        let n = c.image_h * c.image_w * c.channels;
        let data: Vec<f64> = (0..n).map(|_| rng.uniform01()).collect();
        Tensor::from_vec(data, &[c.image_h, c.image_w, c.channels]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(tiny_config().validate().is_ok());
        let mut c = tiny_config();
        c.patch_size = 7;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.num_heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patchify_token_count() {
        // 32x32 image at patch size 8 -> 16 tokens
        let c = tiny_config();
        let mut rng = Rng::new(1);
        let expert = make_synthetic_expert(&c, &mut rng).unwrap();
        let image = random_image(&mut rng, &c);
        let tokens = expert.patchify(&image).unwrap();
        assert_eq!(tokens.shape(), &[16, 32]);
    }

    #[test]
    fn patchify_zero_weights_yields_pos_embed() {
        let c = tiny_config();
        let mut rng = Rng::new(2);
        let mut expert = make_synthetic_expert(&c, &mut rng).unwrap();
        expert.patch_weight = Tensor::zeros(&[c.patch_dim(), c.embed_dim]);
        expert.patch_bias = Tensor::zeros(&[c.embed_dim]);
        let image = Tensor::zeros(&[c.image_h, c.image_w, c.channels]);
        let tokens = expert.patchify(&image).unwrap();
        assert_eq!(tokens.data(), expert.pos_embed.data());
    }

    #[test]
    fn patchify_is_deterministic_across_equal_experts() {
        let c = tiny_config();
        let expert_a = make_synthetic_expert(&c, &mut Rng::new(3)).unwrap();
        let expert_b = make_synthetic_expert(&c, &mut Rng::new(3)).unwrap();
        let image = random_image(&mut Rng::new(4), &c);
        assert_eq!(
            expert_a.patchify(&image).unwrap().data(),
            expert_b.patchify(&image).unwrap().data()
        );
    }

    #[test]
    fn patchify_rejects_wrong_dims() {
        let c = tiny_config();
        let expert = make_synthetic_expert(&c, &mut Rng::new(5)).unwrap();
        let bad = Tensor::zeros(&[16, 32, 1]);
        assert!(expert.patchify(&bad).is_err());
    }

    #[test]
    fn trans_layer_residual_identity_with_zero_weights() {
        let c = tiny_config();
        let mut rng = Rng::new(6);
        let mut expert = make_synthetic_expert(&c, &mut rng).unwrap();
        let d = c.embed_dim;
        for w in &mut expert.layers {
            for t in [
                &mut w.wq, &mut w.bq, &mut w.wk, &mut w.bk, &mut w.wv, &mut w.bv, &mut w.wo,
                &mut w.bo, &mut w.w_up, &mut w.b_up, &mut w.w_down, &mut w.b_down,
            ] {
                *t = Tensor::zeros(t.shape());
            }
            w.ln1_gamma = Tensor::zeros(&[d]);
            w.ln1_beta = Tensor::zeros(&[d]);
            w.ln2_gamma = Tensor::zeros(&[d]);
            w.ln2_beta = Tensor::zeros(&[d]);
        }
        let tokens =
            Tensor::from_vec((0..20 * d).map(|i| (i % 13) as f64 * 0.1).collect(), &[20, d])
                .unwrap();
        let out = expert.trans_layer_value(0, &tokens).unwrap();
        assert_eq!(out.data(), tokens.data());
    }

    #[test]
    fn trans_layer_rejects_bad_layer_index() {
        let c = tiny_config();
        let expert = make_synthetic_expert(&c, &mut Rng::new(7)).unwrap();
        let tokens = Tensor::zeros(&[4, c.embed_dim]);
        assert!(expert.trans_layer_value(c.num_layers, &tokens).is_err());
    }

    #[test]
    fn trans_layer_preserves_shape() {
        let c = tiny_config();
        let expert = make_synthetic_expert(&c, &mut Rng::new(8)).unwrap();
        for rows in [1, 4, 20] {
            let mut rng = Rng::new(rows as u64);
            let tokens = Tensor::from_vec(
                (0..rows * c.embed_dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                &[rows, c.embed_dim],
            )
            .unwrap();
            let out = expert.trans_layer_value(1, &tokens).unwrap();
            assert_eq!(out.shape(), tokens.shape());
        }
    }

    #[test]
    fn trans_layer_is_permutation_equivariant() {
        let c = tiny_config();
        let expert = make_synthetic_expert(&c, &mut Rng::new(9)).unwrap();
        let d = c.embed_dim;
        let rows = 6;
        let mut rng = Rng::new(10);
        let tokens = Tensor::from_vec(
            (0..rows * d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            &[rows, d],
        )
        .unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut permuted = Tensor::zeros(&[rows, d]);
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..d {
                permuted.set2(dst, j, tokens.get2(src, j));
            }
        }
        let out = expert.trans_layer_value(2, &tokens).unwrap();
        let out_perm = expert.trans_layer_value(2, &permuted).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..d {
                let a = out_perm.get2(dst, j);
                let b = out.get2(src, j);
                assert!((a - b).abs() < 1e-12, "row {dst} col {j}: {a} vs {b}");
            }
        }
    }

    /// Standalone pre-norm block evaluation with plain nested loops; shares
    /// no code with the graph implementation.
    fn reference_block(
        tokens: &[Vec<f64>],
        w: &LayerWeights,
        eps: f64,
    ) -> Vec<Vec<f64>> {
        let rows = tokens.len();
        let d = tokens[0].len();
        let layernorm = |x: &[Vec<f64>], gamma: &Tensor, beta: &Tensor| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    let mean: f64 = row.iter().sum::<f64>() / d as f64;
                    let var: f64 =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    (0..d)
                        .map(|j| gamma.data()[j] * (row[j] - mean) * inv + beta.data()[j])
                        .collect()
                })
                .collect()
        };
        let linear = |x: &[Vec<f64>], wt: &Tensor, b: &Tensor| -> Vec<Vec<f64>> {
            let (wi, wo) = (wt.shape()[0], wt.shape()[1]);
            x.iter()
                .map(|row| {
                    (0..wo)
                        .map(|o| {
                            let mut acc = b.data()[o];
                            for i in 0..wi {
                                acc += row[i] * wt.data()[i * wo + o];
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        };
        let normed = layernorm(tokens, &w.ln1_gamma, &w.ln1_beta);
        let q = linear(&normed, &w.wq, &w.bq);
        let k = linear(&normed, &w.wk, &w.bk);
        let v = linear(&normed, &w.wv, &w.bv);
        // single head
        let scale = 1.0 / (d as f64).sqrt();
        let mut mixed = vec![vec![0.0; d]; rows];
        for i in 0..rows {
            let mut scores: Vec<f64> = (0..rows)
                .map(|j| (0..d).map(|t| q[i][t] * k[j][t]).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in scores.iter_mut() {
                *s /= sum;
            }
            for j in 0..rows {
                for t in 0..d {
                    mixed[i][t] += scores[j] * v[j][t];
                }
            }
        }
        let projected = linear(&mixed, &w.wo, &w.bo);
        let after_attn: Vec<Vec<f64>> = (0..rows)
            .map(|i| (0..d).map(|j| tokens[i][j] + projected[i][j]).collect())
            .collect();
        let normed2 = layernorm(&after_attn, &w.ln2_gamma, &w.ln2_beta);
        let up = linear(&normed2, &w.w_up, &w.b_up);
        let act: Vec<Vec<f64>> = up
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&x| {
                        let u = (2.0 / std::f64::consts::PI).sqrt()
                            * (x + 0.044715 * x * x * x);
                        0.5 * x * (1.0 + u.tanh())
                    })
                    .collect()
            })
            .collect();
        let down = linear(&act, &w.w_down, &w.b_down);
        (0..rows)
            .map(|i| (0..d).map(|j| after_attn[i][j] + down[i][j]).collect())
            .collect()
    }

    #[test]
    fn trans_layer_matches_reference_evaluation() {
        // one head, D = 4, three tokens
        let c = BackboneConfig {
            image_h: 8,
            image_w: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 2.0,
            eps: 1e-6,
        };
        let mut rng = Rng::new(11);
        let mut expert = make_synthetic_expert(&c, &mut rng).unwrap();
        // exaggerate the weights so the block does real mixing
        for w in &mut expert.layers {
            for t in [&mut w.wq, &mut w.wk, &mut w.wv, &mut w.wo, &mut w.w_up, &mut w.w_down] {
                *t = t.scale(25.0);
            }
        }
        let tokens = vec![
            vec![0.3, -0.7, 1.1, 0.2],
            vec![-0.5, 0.9, 0.0, -1.2],
            vec![0.8, 0.1, -0.4, 0.6],
        ];
        let flat: Vec<f64> = tokens.iter().flatten().copied().collect();
        let input = Tensor::from_vec(flat, &[3, 4]).unwrap();
        let out = expert.trans_layer_value(0, &input).unwrap();
        let expected = reference_block(&tokens, &expert.layers[0], c.eps);
        for i in 0..3 {
            for j in 0..4 {
                let got = out.get2(i, j);
                let want = expected[i][j];
                assert!(
                    (got - want).abs() < 1e-12,
                    "mismatch at ({i},{j}): {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn synthetic_expert_determinism_and_divergence() {
        let c = tiny_config();
        let a = make_synthetic_expert(&c, &mut Rng::new(42)).unwrap();
        let b = make_synthetic_expert(&c, &mut Rng::new(42)).unwrap();
        assert_eq!(a.to_archive().to_bytes(), b.to_archive().to_bytes());

        let other = make_synthetic_expert(&c, &mut Rng::new(43)).unwrap();
        assert_ne!(a.to_archive().to_bytes(), other.to_archive().to_bytes());
        assert!(a.frozen() && other.frozen());
    }

    #[test]
    fn expert_archive_round_trip_preserves_forward() {
        let c = tiny_config();
        let mut rng = Rng::new(44);
        let expert = make_synthetic_expert(&c, &mut rng).unwrap();
        let image = random_image(&mut rng, &c);
        let before = expert.forward_patch_tokens(&image).unwrap();

        let dir = std::env::temp_dir().join("pmoe_expert_roundtrip.pmwa");
        expert.save(&dir).unwrap();
        let reloaded = ExpertBackbone::load(&dir).unwrap();
        let after = reloaded.forward_patch_tokens(&image).unwrap();
        assert_eq!(before.data(), after.data());
        std::fs::remove_file(dir).ok();
    }
}
