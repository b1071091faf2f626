//! Finite-difference gradient checking.
//!
//! A differentiable scalar function is expressed as a graph builder so the
//! same construction yields both the analytic gradient (reverse pass) and
//! plain forward evaluations for central differences. The two must agree
//! elementwise; the report keeps the worst offender.

use rayon::prelude::*;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error over all parameter elements.
    pub worst_rel_err: f64,
    /// Index of the parameter tensor holding the worst element.
    pub worst_param: usize,
    /// Flat element index within that tensor.
    pub worst_elem: usize,
    /// Analytic and numerical gradients at the worst element.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Total elements checked.
    pub elements: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_err < self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} elements, max relative error {:.3e} (param {} elem {}: analytic {:.6e} vs numeric {:.6e}), tol {:.1e}: {}",
            self.elements,
            self.worst_rel_err,
            self.worst_param,
            self.worst_elem,
            self.worst_analytic,
            self.worst_numeric,
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with a unit floor: |a - n| / max(|a|, |n|, 1). Bounds the
/// absolute error for gradients below one and the relative error above.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks the analytic gradient of `build` against central finite
/// differences `(f(p+h) - f(p-h)) / 2h` for every element of every
/// parameter. `build` must construct a scalar loss from leaves bound in
/// the order of `params`.
pub fn grad_check<F>(build: F, params: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars)?;
        let v = g.value(loss);
        if v.numel() != 1 {
            return Err(Error::shape("grad_check function must return a scalar"));
        }
        let x = v.item();
        if !x.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(x)
    };

    // Analytic pass: all parameters bound as grad-requiring leaves.
    let grad_params: Vec<Tensor> = params
        .iter()
        .map(|t| t.clone().with_grad())
        .collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = grad_params.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?; // rejects non-finite and non-scalar losses
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    // Numerical pass, parallel over elements. Each evaluation perturbs one
    // element of a private copy of the parameters.
    let plain: Vec<Tensor> = grad_params
        .iter()
        .map(|t| {
            let mut c = t.clone();
            c.set_requires_grad(false);
            c
        })
        .collect();
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |ei| (pi, ei)))
        .collect();
    let results: Vec<Result<(f64, f64)>> = coords
        .par_iter()
        .map(|&(pi, ei)| {
            let mut work = plain.clone();
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - h;
            let fm = eval(&work)?;
            let numeric = (fp - fm) / (2.0 * h);
            Ok((analytic[pi].data()[ei], numeric))
        })
        .collect();

    let mut report = GradCheckReport {
        worst_rel_err: 0.0,
        worst_param: 0,
        worst_elem: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        elements: coords.len(),
        tol,
    };
    for (&(pi, ei), res) in coords.iter().zip(results) {
        let (a, n) = res?;
        let e = rel_err(a, n);
        if e > report.worst_rel_err {
            report.worst_rel_err = e;
            report.worst_param = pi;
            report.worst_elem = ei;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.uniform(-scale, scale)).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn quadratic_matches_exactly() {
        // f(p) = sum(p^2): analytic 2p, central difference exact for quadratics.
        let p = Tensor::from_vec(vec![1.0, -2.0, 0.5, 0.0], &[4]).unwrap();
        let report = grad_check(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                Ok(g.sum_all(sq))
            },
            &[p],
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn softmax_cross_entropy_tight() {
        let mut rng = Rng::new(21);
        let logits = random_tensor(&mut rng, &[3, 5], 2.0);
        let report = grad_check(
            |g, vars| g.cross_entropy(vars[0], &[1, 4, 0]),
            &[logits],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn primitive_ops_pass_at_1e6() {
        let mut rng = Rng::new(33);
        let a = random_tensor(&mut rng, &[3, 4], 1.0);
        let b = random_tensor(&mut rng, &[4, 2], 1.0);
        let report = grad_check(
            |g, vars| {
                let c = g.matmul(vars[0], vars[1])?;
                let s = g.softmax(c);
                let e = g.mul(s, s)?;
                Ok(g.sum_all(e))
            },
            &[a.clone(), b.clone()],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "matmul+softmax: {report}");

        let gamma = random_tensor(&mut rng, &[4], 1.0);
        let beta = random_tensor(&mut rng, &[4], 0.5);
        let report = grad_check(
            |g, vars| {
                let ln = g.layernorm(vars[0], vars[1], vars[2], 1e-6)?;
                let ge = g.gelu(ln);
                let m = g.mean_rows(ge)?;
                let mm = g.mul(m, m)?;
                Ok(g.sum_all(mm))
            },
            &[a.clone(), gamma, beta],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "layernorm+gelu+mean: {report}");

        // linear layer: x @ w + bias
        let w = random_tensor(&mut rng, &[4, 3], 1.0);
        let bias = random_tensor(&mut rng, &[3], 1.0);
        let report = grad_check(
            |g, vars| {
                let y = g.matmul(vars[0], vars[1])?;
                let y = g.add_row_broadcast(y, vars[2])?;
                g.cross_entropy(y, &[0, 2, 1])
            },
            &[a, w, bias],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "linear+xent: {report}");
    }

    #[test]
    fn structural_ops_pass() {
        let mut rng = Rng::new(55);
        let a = random_tensor(&mut rng, &[4, 3], 1.0);
        let bank = random_tensor(&mut rng, &[2, 2, 3], 1.0);
        let w = random_tensor(&mut rng, &[2, 2], 0.5);
        let report = grad_check(
            |g, vars| {
                let top = g.slice_rows(vars[0], 0, 2)?;
                let bottom = g.slice_rows(vars[0], 2, 2)?;
                let cat = g.concat_rows(&[bottom, top])?;
                let left = g.slice_cols(cat, 0, 2)?;
                let right = g.slice_cols(cat, 2, 1)?;
                let cat2 = g.concat_cols(&[right, left])?;
                let gathered = g.gather_rows(cat2, vec![1, 1, 3])?;
                let scattered = g.scatter_rows(gathered, vec![0, 2, 4], 5)?;
                let sm = g.softmax(vars[1]);
                let smr = g.reshape(sm, &[2, 2])?;
                let fused = g.fuse(smr, vars[2])?;
                let s1 = g.sum_all(scattered);
                let s2 = g.sum_all(fused);
                let tot = g.add(s1, s2)?;
                let sq = g.mul(tot, tot)?;
                Ok(g.sum_all(sq))
            },
            &[a, w, bank],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn broadcast_ops_pass() {
        let mut rng = Rng::new(77);
        let v = random_tensor(&mut rng, &[3], 1.0);
        let u = random_tensor(&mut rng, &[4], 1.0);
        let report = grad_check(
            |g, vars| {
                let r = g.broadcast_rows(vars[0], 4)?;
                let c = g.broadcast_cols(vars[1], 3)?;
                let p = g.mul(r, c)?;
                let m = g.mean_rows(p)?;
                let sq = g.mul(m, m)?;
                Ok(g.sum_all(sq))
            },
            &[v, u],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let p = Tensor::scalar(0.0);
        let err = grad_check(
            |g, vars| {
                // 1/p at p=0 is infinite
                let inv = g.leaf(Tensor::scalar(f64::INFINITY));
                let x = g.mul(vars[0], inv)?;
                Ok(g.sum_all(x))
            },
            &[p],
            1e-5,
            1e-6,
        );
        assert!(err.is_err());
    }
}
