//! AdamW with decoupled weight decay.

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.weight_decay < 0.0
            || self.batch_size == 0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return Err(Error::Config("invalid training hyperparameters".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// One bias-corrected update:
/// `p -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * p)`,
/// the decay applied to the parameter directly rather than to the gradient.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Training {
            step: state.step,
            message: format!(
                "parameter/gradient/state count mismatch: {}/{}/{}",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Training {
                step: state.step,
                message: format!(
                    "gradient {} has shape {:?}, parameter has {:?}",
                    i,
                    g.shape(),
                    p.shape()
                ),
            });
        }
        if !g.is_finite() {
            return Err(Error::Training {
                step: state.step,
                message: format!("non-finite gradient in parameter {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - config.beta1.powi(t);
    let corr2 = 1.0 - config.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (((pv, &gv), mv), vv) in pd
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            let mhat = *mv / corr1;
            let vhat = *vv / corr2;
            *pv -= config.learning_rate
                * (mhat / (vhat.sqrt() + config.adam_eps) + config.weight_decay * *pv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> Tensor {
        Tensor::scalar(value).with_grad()
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = single_param(1.5);
        let mut state = AdamState::new(&[&p]);
        let config = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut state, &config).unwrap();
        }
        assert_eq!(p.data()[0], 1.5);
    }

    #[test]
    fn zero_grad_with_decay_scales_by_one_minus_lr_lambda() {
        let mut p = single_param(2.0);
        let mut state = AdamState::new(&[&p]);
        let config = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let factor = 1.0 - 0.1 * 0.5;
        let mut expected = 2.0;
        for _ in 0..3 {
            adamw_step(&mut [&mut p], &[Tensor::scalar(0.0)], &mut state, &config).unwrap();
            expected *= factor;
            assert!((p.data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_matches_hand_unrolled_updates() {
        let (lr, b1, b2, eps, g) = (0.01, 0.9, 0.999, 1e-8, 0.25);
        let mut p = single_param(1.0);
        let mut state = AdamState::new(&[&p]);
        let config = TrainConfig {
            learning_rate: lr,
            weight_decay: 0.0,
            beta1: b1,
            beta2: b2,
            adam_eps: eps,
            ..TrainConfig::default()
        };
        // hand unroll three steps
        let (mut m, mut v, mut expected) = (0.0f64, 0.0f64, 1.0f64);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            expected -= lr * mhat / (vhat.sqrt() + eps);

            adamw_step(&mut [&mut p], &[Tensor::scalar(g)], &mut state, &config).unwrap();
            assert!(
                (p.data()[0] - expected).abs() < 1e-15,
                "step {t}: {} vs {expected}",
                p.data()[0]
            );
        }
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut p = single_param(1.0);
        let mut state = AdamState::new(&[&p]);
        let config = TrainConfig::default();
        adamw_step(&mut [&mut p], &[Tensor::scalar(0.5)], &mut state, &config).unwrap();
        let err = adamw_step(
            &mut [&mut p],
            &[Tensor::scalar(f64::NAN)],
            &mut state,
            &config,
        )
        .unwrap_err();
        match err {
            Error::Training { step, .. } => assert_eq!(step, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
