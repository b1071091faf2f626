//! Synthetic classification tasks.
//!
//! The plain generator plants a per-class template in pixel space, which any
//! of the model variants can fit.
//!
//! The complementary generator builds a binary task whose label is split
//! across two specific frozen experts. The label sign `t` is additively
//! secret-shared: one share `r ~ N(0, sigma^2)` rides a patch direction in
//! the null space of expert B's patch projection (visible only to A), the
//! complementary share `t - r` rides a direction in the null space of A's
//! projection (visible only to B). Recovering `t` requires both streams, so
//! a linear probe on either expert's features alone is noise-bounded while
//! the concatenation solves the task, which is exactly what the generation
//! certificate checks. The B-side direction is additionally solved so the
//! two shares' mean-pooled, expert-averaged feature responses cancel,
//! keeping the label nearly invisible to a linear head on the frozen
//! average and reserving it for input-conditional prompting.

use rayon::prelude::*;

use crate::backbone::{make_synthetic_expert, BackboneConfig, ExpertBackbone};
use crate::numerics::{Rng, Tensor};
use crate::{Error, Result};

/// Labeled images; per-class counts are exact and class blocks contiguous.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Expert coupling for the complementary generator.
#[derive(Debug, Clone)]
pub struct ComplementaryParams {
    pub expert_a_seed: u64,
    pub expert_b_seed: u64,
    pub backbone: BackboneConfig,
}

impl ComplementaryParams {
    pub fn build_experts(&self) -> Result<(ExpertBackbone, ExpertBackbone)> {
        let a = make_synthetic_expert(&self.backbone, &mut Rng::new(self.expert_a_seed))?;
        let b = make_synthetic_expert(&self.backbone, &mut Rng::new(self.expert_b_seed))?;
        Ok((a, b))
    }
}

#[derive(Debug, Clone)]
pub enum GeneratorKind {
    Plain,
    Complementary(ComplementaryParams),
}

/// Deterministic synthetic task description.
#[derive(Debug, Clone)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub kind: GeneratorKind,
}

/// Probe accuracies backing a complementary task.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub union_accuracy: f64,
    pub expert_a_accuracy: f64,
    pub expert_b_accuracy: f64,
    pub attempts: usize,
}

/// A generated task: disjoint train/test splits plus the certificate for
/// complementary tasks.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub train: Dataset,
    pub test: Dataset,
    pub certificate: Option<Certificate>,
}

/// Union probe must reach this accuracy on the held-out split.
pub const CERT_UNION_MIN: f64 = 0.95;
/// Either single-expert probe must stay at or below this accuracy.
pub const CERT_SINGLE_MAX: f64 = 0.70;
/// A probe on mean-pooled, expert-averaged frozen features (the view a
/// linear head gets without prompting) must stay at or below this.
pub const POOLED_LEAK_MAX: f64 = 0.65;
const CERT_MAX_ATTEMPTS: usize = 10;

/// Std of the secret share `r`. The single-expert information bound is
/// `Phi(1 / SHARE_STD)`, about 63 percent at 3.
const SHARE_STD: f64 = 3.0;
/// Pixel-space scale of one share-coefficient unit. Small enough that the
/// frozen experts respond nearly linearly, which keeps the quiet-direction
/// solve accurate and starves quadratic leakage paths.
const SIGNAL_SCALE: f64 = 0.05;
/// Iid pixel noise std; also buries the residual linear leakage of the
/// share directions below the pooled-feature noise floor.
const PIXEL_NOISE: f64 = 0.01;

pub fn generate_synthetic(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    if spec.num_classes < 2 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::Generation(
            "need at least two classes and non-empty splits".into(),
        ));
    }
    match &spec.kind {
        GeneratorKind::Plain => generate_plain(spec),
        GeneratorKind::Complementary(params) => generate_complementary(spec, params),
    }
}

fn quantize_unit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn image_from_pixels(spec: &SyntheticTaskSpec, pixels: Vec<f64>) -> Tensor {
    Tensor::from_vec(
        pixels.into_iter().map(quantize_unit).collect(),
        &[spec.image_h, spec.image_w, spec.channels],
    )
    .expect("static shape")
}

fn generate_plain(spec: &SyntheticTaskSpec) -> Result<SyntheticDataset> {
    let n_pixels = spec.image_h * spec.image_w * spec.channels;
    let base = Rng::new(spec.seed);
    let mut template_rng = base.derive(1);
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..n_pixels)
                .map(|_| 0.5 + template_rng.uniform(-0.25, 0.25))
                .collect()
        })
        .collect();
    let build_split = |per_class: usize, label_stream: u64| -> Dataset {
        let mut rng = base.derive(label_stream);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (c, template) in templates.iter().enumerate() {
            for _ in 0..per_class {
                let pixels: Vec<f64> = template
                    .iter()
                    .map(|&t| t + rng.normal() * 0.05)
                    .collect();
                images.push(image_from_pixels(spec, pixels));
                labels.push(c);
            }
        }
        Dataset {
            images,
            labels,
            num_classes: spec.num_classes,
        }
    };
    Ok(SyntheticDataset {
        train: build_split(spec.train_per_class, 2),
        test: build_split(spec.test_per_class, 3),
        certificate: None,
    })
}

// ---- complementary construction ----------------------------------------

fn generate_complementary(
    spec: &SyntheticTaskSpec,
    params: &ComplementaryParams,
) -> Result<SyntheticDataset> {
    if spec.num_classes != 2 {
        return Err(Error::Generation(
            "the complementary generator produces a binary task".into(),
        ));
    }
    let bb = &params.backbone;
    if bb.image_h != spec.image_h || bb.image_w != spec.image_w || bb.channels != spec.channels {
        return Err(Error::Generation(
            "backbone image dims disagree with the task spec".into(),
        ));
    }
    if bb.patch_dim() <= bb.embed_dim {
        return Err(Error::Generation(format!(
            "patch dim {} must exceed embed dim {} so the projections have null spaces",
            bb.patch_dim(),
            bb.embed_dim
        )));
    }
    let (expert_a, expert_b) = params.build_experts()?;
    let responses = measure_bases(spec, &expert_a, &expert_b)?;

    let mut last_cert = None;
    for attempt in 0..CERT_MAX_ATTEMPTS {
        let attempt_rng = Rng::new(spec.seed).derive(100 + attempt as u64);
        let dataset = match build_complementary_attempt(
            spec,
            &expert_a,
            &expert_b,
            &responses,
            attempt,
            &attempt_rng,
        ) {
            Ok(d) => d,
            Err(_) if attempt + 1 < CERT_MAX_ATTEMPTS => continue,
            Err(e) => return Err(e),
        };
        let cert = certify(&dataset, &expert_a, &expert_b, attempt + 1)?;
        // extra internal gate: a linear head on mean-pooled, expert-averaged
        // frozen features must stay near the collision bound, otherwise the
        // label leaks around the prompting mechanism entirely
        let leak = pooled_leak_accuracy(&dataset, &expert_a, &expert_b)?;
        if cert.union_accuracy >= CERT_UNION_MIN
            && cert.expert_a_accuracy <= CERT_SINGLE_MAX
            && cert.expert_b_accuracy <= CERT_SINGLE_MAX
            && leak <= POOLED_LEAK_MAX
        {
            return Ok(SyntheticDataset {
                certificate: Some(cert),
                ..dataset
            });
        }
        last_cert = Some((cert, leak));
    }
    Err(Error::Generation(format!(
        "complementary certificate failed after {CERT_MAX_ATTEMPTS} attempts; last probe accuracies {:?}",
        last_cert.map(|(c, leak)| (c.union_accuracy, c.expert_a_accuracy, c.expert_b_accuracy, leak))
    )))
}

fn build_complementary_attempt(
    spec: &SyntheticTaskSpec,
    expert_a: &ExpertBackbone,
    expert_b: &ExpertBackbone,
    responses: &BasisResponses,
    candidate: usize,
    rng: &Rng,
) -> Result<SyntheticDataset> {
    // u_a lives in null(W_B) (invisible to B), u_b in null(W_A). The pair
    // is chosen so their mean-pooled, expert-averaged feature responses
    // cancel: a linear head on pooled frozen features then sees only the
    // single combination r - (t - r) of the two shares, never the pair.
    // u_a is the direction whose A-side response is most cheaply matched
    // from within B's reachable response span, keeping the cancel
    // coefficients small and the refinement well-conditioned.
    let (a_coords, nb_est) =
        &responses.candidates[candidate.min(responses.candidates.len() - 1)];
    // balance the pair: u_b will come out with norm about sqrt(nb_est)
    let scale_a = (1.0 / nb_est.max(1e-6)).sqrt().clamp(0.5, 2.0);
    let u_a: Vec<f64> = normalize(combine(&responses.null_b, a_coords))
        .into_iter()
        .map(|v| v * scale_a)
        .collect();
    let v_a = pooled_response(expert_a, expert_b, spec, &u_a)?;

    // initial cancel coefficients, then Gauss-Newton against the measured
    // nonlinear response
    let target: Vec<f64> = v_a.iter().map(|v| -v).collect();
    let mut coeffs = solve_least_squares(&responses.resp_b, &target, 1e-6)?;
    let va_norm = v_a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale_floor = 0.1 * responses.median_resp_b;
    let mut residual_rel = f64::INFINITY;
    for _ in 0..4 {
        let u_b = combine(&responses.null_a, &coeffs);
        let v_b = pooled_response(expert_a, expert_b, spec, &u_b)?;
        let residual: Vec<f64> = v_a.iter().zip(&v_b).map(|(a, b)| a + b).collect();
        residual_rel = residual.iter().map(|v| v * v).sum::<f64>().sqrt()
            / va_norm.max(scale_floor);
        if residual_rel <= 0.02 {
            break;
        }
        let target: Vec<f64> = residual.iter().map(|v| -v).collect();
        let delta = solve_least_squares(&responses.resp_b, &target, 1e-4)?;
        for (c, d) in coeffs.iter_mut().zip(&delta) {
            *c += d;
        }
    }
    if residual_rel > 0.06 {
        return Err(Error::Generation(format!(
            "collision residual {residual_rel:.3} after refinement"
        )));
    }
    let u_b = combine(&responses.null_a, &coeffs);
    let norm = u_b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(0.1..=4.0).contains(&norm) {
        return Err(Error::Generation(format!(
            "collision produced a degenerate direction (norm {norm:.3})"
        )));
    }

    let build_split = |per_class: usize, stream: u64| -> Dataset {
        let mut srng = rng.derive(stream);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            let t = if class == 0 { -1.0 } else { 1.0 };
            for _ in 0..per_class {
                let r = srng.normal() * SHARE_STD;
                let share_a = r;
                let share_b = t - r;
                let pixels = compose_image(spec, &u_a, &u_b, share_a, share_b, &mut srng);
                images.push(image_from_pixels(spec, pixels));
                labels.push(class);
            }
        }
        Dataset {
            images,
            labels,
            num_classes: 2,
        }
    };
    Ok(SyntheticDataset {
        train: build_split(spec.train_per_class, 2),
        test: build_split(spec.test_per_class, 3),
        certificate: None,
    })
}

/// Null-space bases and their measured pooled responses, shared across
/// generation attempts.
struct BasisResponses {
    null_a: Vec<Vec<f64>>,
    null_b: Vec<Vec<f64>>,
    resp_b: Vec<Vec<f64>>,
    median_resp_b: f64,
    /// Unit coordinate vectors in the null(W_B) basis paired with their
    /// estimated cancel-coefficient norms, ordered from the most cheaply
    /// cancellable onward (band- and visibility-screened).
    candidates: Vec<(Vec<f64>, f64)>,
}

fn combine(basis: &[Vec<f64>], coords: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; basis[0].len()];
    for (c, b) in coords.iter().zip(basis) {
        for (o, &v) in out.iter_mut().zip(b) {
            *o += c * v;
        }
    }
    out
}

fn measure_bases(
    spec: &SyntheticTaskSpec,
    expert_a: &ExpertBackbone,
    expert_b: &ExpertBackbone,
) -> Result<BasisResponses> {
    let null_b = null_space_basis(&expert_b.patch_weight);
    let null_a = null_space_basis(&expert_a.patch_weight);
    if null_a.is_empty() || null_b.is_empty() {
        return Err(Error::Generation("projection null space is empty".into()));
    }
    let resp_a: Vec<Vec<f64>> = null_b
        .par_iter()
        .map(|b| pooled_response(expert_a, expert_b, spec, b))
        .collect::<Result<_>>()?;
    let resp_b: Vec<Vec<f64>> = null_a
        .par_iter()
        .map(|b| pooled_response(expert_a, expert_b, spec, b))
        .collect::<Result<_>>()?;
    let median_resp_b = median(
        resp_b
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
    );

    // X solves resp_b-span coefficients for each A-basis response; the
    // cheapest-to-cancel directions are the smallest singular directions
    // of X, screened for per-patch visibility to expert A
    let m = null_b.len();
    let x_cols: Vec<Vec<f64>> = resp_a
        .iter()
        .map(|ra| {
            let target: Vec<f64> = ra.iter().map(|v| -v).collect();
            solve_least_squares(&resp_b, &target, 1e-6)
        })
        .collect::<Result<_>>()?;
    // Gram of X in A-basis coordinates: G[i][j] = x_i . x_j
    let mut gram = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in i..m {
            let dot: f64 = x_cols[i].iter().zip(&x_cols[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
    }
    let directions = smallest_directions(&gram, 16);

    // visibility screen: keep candidates whose pixel direction projects
    // onto expert A's patch space at a reasonable fraction of the median
    let vis_of = |coords: &[f64]| -> f64 {
        let u = normalize(combine(&null_b, coords));
        Tensor::from_vec(u.clone(), &[1, u.len()])
            .expect("static shape")
            .matmul(&expert_a.patch_weight)
            .expect("shape agreement")
            .into_data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    };
    let median_vis = median(
        (0..m)
            .map(|i| {
                let mut e = vec![0.0; m];
                e[i] = 1.0;
                vis_of(&e)
            })
            .collect(),
    );
    // keep directions in the band where the cancel coefficients are
    // order one: below it the share is invisible in pooled responses (and
    // the A side would need huge amplitude after rebalancing), above it
    // the solve alias-amplifies B's weak response subspace
    let norm_of = |coords: &[f64]| -> f64 {
        let mut acc = vec![0.0; x_cols[0].len()];
        for (c, col) in coords.iter().zip(&x_cols) {
            for (a, &v) in acc.iter_mut().zip(col) {
                *a += c * v;
            }
        }
        acc.iter().map(|v| v * v).sum::<f64>().sqrt()
    };
    let screened: Vec<(Vec<f64>, f64)> = directions
        .into_iter()
        .map(|c| {
            let nb = norm_of(&c);
            (c, nb)
        })
        .filter(|(c, nb)| (0.25..=2.5).contains(nb) && vis_of(c) >= 0.5 * median_vis)
        .collect();
    if screened.is_empty() {
        return Err(Error::Generation(
            "no visible cancellable share direction found".into(),
        ));
    }
    Ok(BasisResponses {
        null_a,
        null_b,
        resp_b,
        median_resp_b,
        candidates: screened,
    })
}

/// The `count` smallest-eigenvalue unit eigenvectors of a symmetric PSD
/// matrix, by deflated inverse iteration.
fn smallest_directions(gram: &[Vec<f64>], count: usize) -> Vec<Vec<f64>> {
    let m = gram.len();
    let trace: f64 = (0..m).map(|i| gram[i][i]).sum();
    let eps = (1e-9 * trace / m as f64).max(1e-14);
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut seed = 0x5EED_u64;
    while found.len() < count.min(m) {
        let mut rng = Rng::new(seed);
        seed += 1;
        let mut x: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
        for _ in 0..60 {
            // deflate previously found directions
            for f in &found {
                let dot: f64 = x.iter().zip(f).map(|(a, b)| a * b).sum();
                for (xi, &fi) in x.iter_mut().zip(f) {
                    *xi -= dot * fi;
                }
            }
            let mut lhs: Vec<Vec<f64>> = gram.to_vec();
            for (i, row) in lhs.iter_mut().enumerate() {
                row[i] += eps;
            }
            let Some(y) = cholesky_solve(lhs, &x) else {
                return found;
            };
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            x = y.into_iter().map(|v| v / norm).collect();
        }
        for f in &found {
            let dot: f64 = x.iter().zip(f).map(|(a, b)| a * b).sum();
            for (xi, &fi) in x.iter_mut().zip(f) {
                *xi -= dot * fi;
            }
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            break;
        }
        found.push(x.into_iter().map(|v| v / norm).collect());
    }
    found
}

/// Tile a patch-space direction over every patch of a flat pixel image.
fn add_tiled(pixels: &mut [f64], u: &[f64], scale: f64, spec: &SyntheticTaskSpec, patch: usize) {
    let (w, c) = (spec.image_w, spec.channels);
    let (gh, gw) = (spec.image_h / patch, spec.image_w / patch);
    for gi in 0..gh {
        for gj in 0..gw {
            for dy in 0..patch {
                let row = gi * patch + dy;
                let col0 = gj * patch;
                let dst = &mut pixels[(row * w + col0) * c..(row * w + col0) * c + patch * c];
                let src = &u[dy * patch * c..(dy + 1) * patch * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += scale * s;
                }
            }
        }
    }
}

fn compose_image(
    spec: &SyntheticTaskSpec,
    u_a: &[f64],
    u_b: &[f64],
    share_a: f64,
    share_b: f64,
    rng: &mut Rng,
) -> Vec<f64> {
    let n = spec.image_h * spec.image_w * spec.channels;
    let patch = patch_size_of(spec, u_a);
    let mut pixels: Vec<f64> = (0..n).map(|_| 0.5 + rng.normal() * PIXEL_NOISE).collect();
    add_tiled(&mut pixels, u_a, SIGNAL_SCALE * share_a, spec, patch);
    add_tiled(&mut pixels, u_b, SIGNAL_SCALE * share_b, spec, patch);
    pixels
}

fn patch_size_of(spec: &SyntheticTaskSpec, u: &[f64]) -> usize {
    // u has length patch*patch*channels
    let per_channel = u.len() / spec.channels;
    (per_channel as f64).sqrt().round() as usize
}

/// Orthonormal basis of `{ x : x @ w = 0 }` for `w: [patch_dim, d]`.
fn null_space_basis(w: &Tensor) -> Vec<Vec<f64>> {
    let (pd, d) = (w.shape()[0], w.shape()[1]);
    // orthonormalize the columns of w
    let mut q: Vec<Vec<f64>> = Vec::new();
    for j in 0..d {
        let mut col: Vec<f64> = (0..pd).map(|i| w.data()[i * d + j]).collect();
        for existing in &q {
            let dot: f64 = col.iter().zip(existing).map(|(a, b)| a * b).sum();
            for (c, &e) in col.iter_mut().zip(existing) {
                *c -= dot * e;
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-10 {
            for c in col.iter_mut() {
                *c /= norm;
            }
            q.push(col);
        }
    }
    // project unit vectors onto the complement and orthonormalize
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 0..pd {
        let mut v = vec![0.0; pd];
        v[i] = 1.0;
        for existing in q.iter().chain(&basis) {
            let dot: f64 = v.iter().zip(existing).map(|(a, b)| a * b).sum();
            for (c, &e) in v.iter_mut().zip(existing) {
                *c -= dot * e;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for c in v.iter_mut() {
                *c /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Secant response of the mean-pooled, expert-averaged final features to a
/// unit of share coefficient along `u`, measured at the working amplitude.
fn pooled_response(
    expert_a: &ExpertBackbone,
    expert_b: &ExpertBackbone,
    spec: &SyntheticTaskSpec,
    u: &[f64],
) -> Result<Vec<f64>> {
    let n = spec.image_h * spec.image_w * spec.channels;
    let patch = patch_size_of(spec, u);
    let probe = SHARE_STD; // representative coefficient magnitude
    let eval = |coef: f64| -> Result<Vec<f64>> {
        let mut pixels = vec![0.5; n];
        add_tiled(&mut pixels, u, SIGNAL_SCALE * coef, spec, patch);
        let image = Tensor::from_vec(pixels, &[spec.image_h, spec.image_w, spec.channels])?;
        let fa = expert_a.forward_patch_tokens(&image)?;
        let fb = expert_b.forward_patch_tokens(&image)?;
        let pooled_a = fa.mean_axis(0)?;
        let pooled_b = fb.mean_axis(0)?;
        Ok(pooled_a
            .data()
            .iter()
            .zip(pooled_b.data())
            .map(|(a, b)| 0.5 * (a + b))
            .collect())
    };
    let plus = eval(probe)?;
    let minus = eval(-probe)?;
    Ok(plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| (p - m) / (2.0 * probe * SIGNAL_SCALE))
        .collect())
}

/// Ridge-regularized least squares `min |A c - target|^2` where `A`'s
/// columns are the response vectors; `ridge_rel` scales the mean Gram
/// diagonal.
fn solve_least_squares(columns: &[Vec<f64>], target: &[f64], ridge_rel: f64) -> Result<Vec<f64>> {
    let m = columns.len();
    let mut gram = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        for j in i..m {
            let dot: f64 = columns[i].iter().zip(&columns[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
        rhs[i] = columns[i].iter().zip(target).map(|(a, b)| a * b).sum();
    }
    let ridge = ridge_rel * (0..m).map(|i| gram[i][i]).sum::<f64>() / m as f64;
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += ridge.max(1e-14);
    }
    cholesky_solve(gram, &rhs)
        .ok_or_else(|| Error::Generation("collision solve is singular".into()))
}

/// Solve `A x = b` for symmetric positive definite `A` (in place).
pub(crate) fn cholesky_solve(mut a: Vec<Vec<f64>>, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i][j];
            for k in 0..j {
                sum -= a[i][k] * a[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                a[i][i] = sum.sqrt();
            } else {
                a[i][j] = sum / a[j][j];
            }
        }
    }
    // forward: L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i][k] * y[k];
        }
        y[i] = sum / a[i][i];
    }
    // back: L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= a[k][i] * x[k];
        }
        x[i] = sum / a[i][i];
    }
    Some(x)
}

// ---- certificate --------------------------------------------------------

/// Flattened final-layer patch tokens of one expert for every image.
fn expert_features(expert: &ExpertBackbone, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    ds.images
        .par_iter()
        .map(|img| Ok(expert.forward_patch_tokens(img)?.into_data()))
        .collect()
}

fn concat_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let mut v = x.clone();
            v.extend_from_slice(y);
            v
        })
        .collect()
}

fn signs(labels: &[usize]) -> Vec<f64> {
    labels.iter().map(|&c| if c == 0 { -1.0 } else { 1.0 }).collect()
}

/// Kernel-space ridge probe: fit on train, report test accuracy.
pub fn ridge_probe_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[f64],
    test_x: &[Vec<f64>],
    test_y: &[f64],
) -> Result<f64> {
    let n = train_x.len();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 =
                train_x[i].iter().zip(&train_x[j]).map(|(a, b)| a * b).sum::<f64>() + 1.0;
            gram[i][j] = dot;
            gram[j][i] = dot;
        }
    }
    let lambda = 1e-4 * (0..n).map(|i| gram[i][i]).sum::<f64>() / n as f64;
    for (i, row) in gram.iter_mut().enumerate() {
        row[i] += lambda.max(1e-10);
    }
    let alpha = cholesky_solve(gram, train_y)
        .ok_or_else(|| Error::Generation("probe solve is singular".into()))?;
    let mut correct = 0usize;
    for (x, &y) in test_x.iter().zip(test_y) {
        let score: f64 = train_x
            .iter()
            .zip(&alpha)
            .map(|(xi, &ai)| {
                ai * (x.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() + 1.0)
            })
            .sum();
        if (score >= 0.0) == (y >= 0.0) {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_x.len() as f64)
}

/// Probe accuracy from mean-pooled expert-averaged frozen features.
fn pooled_leak_accuracy(
    dataset: &SyntheticDataset,
    expert_a: &ExpertBackbone,
    expert_b: &ExpertBackbone,
) -> Result<f64> {
    let pooled = |ds: &Dataset| -> Result<Vec<Vec<f64>>> {
        ds.images
            .par_iter()
            .map(|img| {
                let fa = expert_a.forward_patch_tokens(img)?.mean_axis(0)?;
                let fb = expert_b.forward_patch_tokens(img)?.mean_axis(0)?;
                Ok(fa
                    .data()
                    .iter()
                    .zip(fb.data())
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect())
            })
            .collect()
    };
    ridge_probe_accuracy(
        &pooled(&dataset.train)?,
        &signs(&dataset.train.labels),
        &pooled(&dataset.test)?,
        &signs(&dataset.test.labels),
    )
}

fn certify(
    dataset: &SyntheticDataset,
    expert_a: &ExpertBackbone,
    expert_b: &ExpertBackbone,
    attempts: usize,
) -> Result<Certificate> {
    let fa_train = expert_features(expert_a, &dataset.train)?;
    let fb_train = expert_features(expert_b, &dataset.train)?;
    let fa_test = expert_features(expert_a, &dataset.test)?;
    let fb_test = expert_features(expert_b, &dataset.test)?;
    let y_train = signs(&dataset.train.labels);
    let y_test = signs(&dataset.test.labels);
    let union_accuracy = ridge_probe_accuracy(
        &concat_features(&fa_train, &fb_train),
        &y_train,
        &concat_features(&fa_test, &fb_test),
        &y_test,
    )?;
    let expert_a_accuracy = ridge_probe_accuracy(&fa_train, &y_train, &fa_test, &y_test)?;
    let expert_b_accuracy = ridge_probe_accuracy(&fb_train, &y_train, &fb_test, &y_test)?;
    Ok(Certificate {
        union_accuracy,
        expert_a_accuracy,
        expert_b_accuracy,
        attempts,
    })
}
