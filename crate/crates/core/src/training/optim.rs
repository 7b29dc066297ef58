//! Adam with bias correction.

use super::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::nnet::model::Param;
use crate::scalar::Scalar;

pub struct Adam<T> {
    cfg: OptimizerConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    /// Updates applied to each tensor so far.
    steps: Vec<u32>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimizerConfig, params: &[Param<T>]) -> Self {
        Adam {
            cfg,
            m: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect(),
            steps: vec![0; params.len()],
        }
    }

    /// Apply one update. `grads[i]` is `None` for frozen tensors, which keep
    /// both their values and their moment estimates.
    pub fn step(&mut self, params: &mut [Param<T>], grads: &[Option<&[T]>], lrs: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() || lrs.len() != params.len() {
            return Err(Error::shape(
                "adam",
                format!(
                    "{} params, {} grads, {} rates for {} slots",
                    params.len(),
                    grads.len(),
                    lrs.len(),
                    self.m.len()
                ),
            ));
        }
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let eps = T::of(self.cfg.epsilon);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            if g.len() != p.value.numel() {
                return Err(Error::shape(
                    "adam",
                    format!("{}: gradient of {} for {} values", p.name, g.len(), p.value.numel()),
                ));
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = one - b1.powi(t);
            let c2 = one - b2.powi(t);
            let lr = T::of(lrs[i]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{ParamGroup, Tensor};

    fn params() -> Vec<Param<f64>> {
        vec![
            Param {
                name: "a".into(),
                value: Tensor::from_fn(&[3], |i| i as f64),
                group: ParamGroup::Head,
            },
            Param {
                name: "b".into(),
                value: Tensor::full(&[2], 5.0),
                group: ParamGroup::Early,
            },
        ]
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut opt = Adam::new(OptimizerConfig::default(), &p);
        let z = [0.0; 3];
        let z2 = [0.0; 2];
        for _ in 0..5 {
            opt.step(&mut p, &[Some(&z), Some(&z2)], &[0.1, 0.1]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let mut opt = Adam::new(OptimizerConfig::default(), &p);
        let g = [2.0, -3.0, 0.5];
        opt.step(&mut p, &[Some(&g), None], &[0.01, 0.01]).unwrap();
        // bias-corrected first step is lr · sign(g)
        let d: Vec<f64> = p[0].value.data().iter().zip([0.0, 1.0, 2.0]).map(|(a, b)| a - b).collect();
        for (x, s) in d.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((x - 0.01 * s).abs() < 1e-9);
        }
        assert_eq!(p[1], params()[1]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = params();
        let mut opt = Adam::new(OptimizerConfig::default(), &p);
        for _ in 0..2000 {
            let g: Vec<f64> = p[0].value.data().iter().map(|w| 2.0 * (w - 3.0)).collect();
            opt.step(&mut p, &[Some(&g), None], &[0.05, 0.0]).unwrap();
        }
        assert!(p[0].value.data().iter().all(|w| (w - 3.0).abs() < 1e-3));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = params();
        let mut opt = Adam::new(OptimizerConfig::default(), &p);
        assert!(opt.step(&mut p, &[None], &[0.1, 0.1]).is_err());
        let g = [1.0; 2];
        assert!(opt.step(&mut p, &[Some(&g), None], &[0.1, 0.1]).is_err());
    }
}
