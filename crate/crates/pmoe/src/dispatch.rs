//! The dispatcher: dynamic dispatching weights and prompt-token fusion.
//!
//! A shared token-wise MLP maps every input token (expert prompt tokens,
//! accumulated prompt tokens when present, patch tokens) from dimension D to
//! K scores. The patch-token scores are averaged over patches and broadcast;
//! the components are summed and softmaxed over the expert axis, giving one
//! row-stochastic weight row per prompt token. Fusion takes, per token index,
//! the convex combination of all experts' prompt tokens under those weights.
//!
//! The MoE variant replaces the single MLP with several "dispatching expert"
//! MLPs and a router that activates exactly one of them per token (top-1),
//! scaling its output by the router's softmax gate value.

use crate::numerics::{Graph, Rng, Tensor, Var};
use crate::{Error, Result};

/// Token-wise dispatcher MLP for one prompted layer: hidden width D, GELU,
/// then a linear map to K scores. Shared by all experts at that layer.
/// The final linear layer starts at zero so dispatch is uniform before
/// training.
#[derive(Debug, Clone)]
pub struct DispatcherLayer {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DispatcherLayer {
    /// Hidden layer gets Xavier-uniform weights so its activations match
    /// the scale of its inputs; the final layer starts at zero so dispatch
    /// is uniform before training.
    pub fn init(embed_dim: usize, num_experts: usize, rng: &mut Rng) -> DispatcherLayer {
        let bound = (6.0 / (2 * embed_dim) as f64).sqrt();
        let w1: Vec<f64> = (0..embed_dim * embed_dim)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        DispatcherLayer {
            w1: Tensor::from_vec(w1, &[embed_dim, embed_dim])
                .expect("static shape")
                .with_grad(),
            b1: Tensor::zeros(&[embed_dim]).with_grad(),
            w2: Tensor::zeros(&[embed_dim, num_experts]).with_grad(),
            b2: Tensor::zeros(&[num_experts]).with_grad(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.w2.shape()[1]
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }
}

/// Graph bindings for one [`DispatcherLayer`].
#[derive(Clone, Copy)]
pub struct DispatcherLayerVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl DispatcherLayerVars {
    pub fn bind(g: &mut Graph, layer: &DispatcherLayer) -> DispatcherLayerVars {
        DispatcherLayerVars {
            w1: g.leaf(layer.w1.clone()),
            b1: g.leaf(layer.b1.clone()),
            w2: g.leaf(layer.w2.clone()),
            b2: g.leaf(layer.b2.clone()),
        }
    }

    /// Token-wise MLP: `gelu(x @ w1 + b1) @ w2 + b2`.
    pub fn apply(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let h = g.matmul(tokens, self.w1)?;
        let h = g.add_row_broadcast(h, self.b1)?;
        let h = g.gelu(h);
        let out = g.matmul(h, self.w2)?;
        g.add_row_broadcast(out, self.b2)
    }
}

/// Several dispatching-expert MLPs plus a router that picks one per token.
#[derive(Debug, Clone)]
pub struct MoeDispatcher {
    pub experts: Vec<DispatcherLayer>,
    pub router_w: Tensor,
    pub router_b: Tensor,
}

impl MoeDispatcher {
    pub fn init(
        embed_dim: usize,
        num_experts: usize,
        num_dispatch_experts: usize,
        rng: &mut Rng,
    ) -> MoeDispatcher {
        let experts = (0..num_dispatch_experts)
            .map(|_| DispatcherLayer::init(embed_dim, num_experts, rng))
            .collect();
        let rw: Vec<f64> = (0..embed_dim * num_dispatch_experts)
            .map(|_| rng.truncated_normal(0.02))
            .collect();
        MoeDispatcher {
            experts,
            router_w: Tensor::from_vec(rw, &[embed_dim, num_dispatch_experts])
                .expect("static shape")
                .with_grad(),
            router_b: Tensor::zeros(&[num_dispatch_experts]).with_grad(),
        }
    }

    pub fn num_dispatch_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        for e in &self.experts {
            out.extend(e.parameters());
        }
        out.push(&self.router_w);
        out.push(&self.router_b);
        out
    }
}

/// Graph bindings for a [`MoeDispatcher`].
pub struct MoeDispatcherVars {
    pub experts: Vec<DispatcherLayerVars>,
    pub router_w: Var,
    pub router_b: Var,
}

impl MoeDispatcherVars {
    pub fn bind(g: &mut Graph, moe: &MoeDispatcher) -> MoeDispatcherVars {
        MoeDispatcherVars {
            experts: moe
                .experts
                .iter()
                .map(|e| DispatcherLayerVars::bind(g, e))
                .collect(),
            router_w: g.leaf(moe.router_w.clone()),
            router_b: g.leaf(moe.router_b.clone()),
        }
    }

    /// Routed token-wise map. Per token the router softmax picks the top-1
    /// dispatching expert (ties toward the lowest index); only that expert's
    /// MLP runs, and its output is scaled by the winning gate value. The
    /// discrete choice itself is not differentiated; gradients flow through
    /// the gate value and the selected MLP.
    pub fn apply(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let num_tokens = g.value(tokens).rows();
        let k = {
            // output width comes from any expert's final layer
            let first = &self.experts[0];
            g.value(first.w2).cols()
        };
        let router = g.matmul(tokens, self.router_w)?;
        let router = g.add_row_broadcast(router, self.router_b)?;
        let gates = g.softmax(router);

        // top-1 assignment from the gate values
        let gv = g.value(gates);
        let e_count = self.experts.len();
        let mut assignment = vec![0usize; num_tokens];
        for t in 0..num_tokens {
            let row = &gv.data()[t * e_count..(t + 1) * e_count];
            let mut best = 0;
            for (e, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = e;
                }
            }
            assignment[t] = best;
        }

        let mut total: Option<Var> = None;
        for e in 0..e_count {
            let rows: Vec<usize> = (0..num_tokens).filter(|&t| assignment[t] == e).collect();
            if rows.is_empty() {
                continue;
            }
            let sub = g.gather_rows(tokens, rows.clone())?;
            let out = self.experts[e].apply(g, sub)?;
            let gate_rows = g.gather_rows(gates, rows.clone())?;
            let gate_col = g.slice_cols(gate_rows, e, 1)?;
            let gate_vec = g.reshape(gate_col, &[rows.len()])?;
            let gate_b = g.broadcast_cols(gate_vec, k)?;
            let scaled = g.mul(out, gate_b)?;
            let scattered = g.scatter_rows(scaled, rows, num_tokens)?;
            total = Some(match total {
                Some(acc) => g.add(acc, scattered)?,
                None => scattered,
            });
        }
        total.ok_or_else(|| Error::shape("moe dispatch on zero tokens"))
    }
}

/// Score components before combination.
pub struct DispatchComponents {
    /// Expert-prompt-token scores, `N_p x K`.
    pub d_e: Var,
    /// Accumulated-prompt scores, absent at the first prompted layer.
    pub d_p: Option<Var>,
    /// Patch-token scores, `N_z x K` (before averaging).
    pub d_z: Var,
    /// Final row-stochastic dispatching weights, `N_p x K`.
    pub weights: Var,
}

fn combine_components<A>(
    g: &mut Graph,
    apply: A,
    epts: Var,
    accum: Option<Var>,
    patches: Var,
) -> Result<DispatchComponents>
where
    A: Fn(&mut Graph, Var) -> Result<Var>,
{
    let np = g.value(epts).rows();
    let d_e = apply(g, epts)?;
    let d_z = apply(g, patches)?;
    let d_p = match accum {
        Some(acc) => {
            if g.value(acc).shape() != g.value(epts).shape() {
                return Err(Error::shape(format!(
                    "accumulated prompts {:?} do not match prompt tokens {:?}",
                    g.value(acc).shape(),
                    g.value(epts).shape()
                )));
            }
            Some(apply(g, acc)?)
        }
        None => None,
    };
    let z_mean = g.mean_rows(d_z)?;
    let z_broadcast = g.broadcast_rows(z_mean, np)?;
    let mut logits = g.add(d_e, z_broadcast)?;
    if let Some(p) = d_p {
        logits = g.add(logits, p)?;
        return Ok(DispatchComponents {
            d_e,
            d_p: Some(p),
            d_z,
            weights: g.softmax(logits),
        });
    }
    Ok(DispatchComponents {
        d_e,
        d_p: None,
        d_z,
        weights: g.softmax(logits),
    })
}

/// Dispatching weights from the shared MLP: softmax over the expert axis of
/// `D_E + D_P + Average(D_Z)`, the `D_P` term omitted when `accum` is absent
/// (the first prompted layer).
pub fn dispatch_weights(
    g: &mut Graph,
    layer: &DispatcherLayerVars,
    epts: Var,
    accum: Option<Var>,
    patches: Var,
) -> Result<Var> {
    Ok(dispatch_components(g, layer, epts, accum, patches)?.weights)
}

/// Same as [`dispatch_weights`] but exposing the pre-combination components.
pub fn dispatch_components(
    g: &mut Graph,
    layer: &DispatcherLayerVars,
    epts: Var,
    accum: Option<Var>,
    patches: Var,
) -> Result<DispatchComponents> {
    let l = *layer;
    combine_components(g, move |g, t| l.apply(g, t), epts, accum, patches)
}

/// Dispatching weights from the MoE-MLP dispatcher; identical combination,
/// routed token-wise map.
pub fn moe_dispatch(
    g: &mut Graph,
    moe: &MoeDispatcherVars,
    epts: Var,
    accum: Option<Var>,
    patches: Var,
) -> Result<Var> {
    Ok(combine_components(g, |g, t| moe.apply(g, t), epts, accum, patches)?.weights)
}

/// Integrated prompt tokens: per token index the convex combination of all
/// experts' prompt tokens under the dispatching weights.
pub fn fuse_tokens(g: &mut Graph, weights: Var, all_epts: Var) -> Result<Var> {
    g.fuse(weights, all_epts)
}

/// One dispatch-weight row observed during a traced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub layer: usize,
    pub expert: usize,
    pub token: usize,
    pub weights: Vec<f64>,
    pub argmax: usize,
}

/// Per-forward dispatch trace; one record per (layer, expert, token).
#[derive(Debug, Clone, Default)]
pub struct DispatchTrace {
    pub records: Vec<TraceRecord>,
}

impl DispatchTrace {
    pub fn new() -> Self {
        DispatchTrace::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Append one record per weight row. Argmax ties break toward the
    /// lowest expert index.
    pub fn record(&mut self, weights: &Tensor, layer: usize, expert: usize) {
        debug_assert_eq!(weights.rank(), 2);
        let k = weights.cols();
        for (token, row) in weights.data().chunks_exact(k).enumerate() {
            let mut argmax = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[argmax] {
                    argmax = i;
                }
            }
            self.records.push(TraceRecord {
                layer,
                expert,
                token,
                weights: row.to_vec(),
                argmax,
            });
        }
    }

    /// Histogram of argmax choices per layer: `layer -> counts per expert`.
    pub fn argmax_histogram(&self, num_experts: usize) -> std::collections::BTreeMap<usize, Vec<usize>> {
        let mut hist: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for r in &self.records {
            let counts = hist.entry(r.layer).or_insert_with(|| vec![0; num_experts]);
            counts[r.argmax] += 1;
        }
        hist
    }

    /// CSV with header `layer,expert,token,argmax,w0,...,w{K-1}`, weights
    /// at six decimal places.
    pub fn to_csv(&self) -> String {
        let k = self.records.first().map(|r| r.weights.len()).unwrap_or(0);
        let mut out = String::from("layer,expert,token,argmax");
        for i in 0..k {
            out.push_str(&format!(",w{i}"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}", r.layer, r.expert, r.token, r.argmax));
            for w in &r.weights {
                out.push_str(&format!(",{w:.6}"));
            }
            out.push('\n');
        }
        out
    }
}
