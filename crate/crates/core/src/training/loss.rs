//! Focal classification loss and smooth-L1 box regression.

use serde::Serialize;

use super::config::FocalConfig;
use super::matching::MatchResult;
use crate::error::{Error, Result};
use crate::nnet::{sigmoid, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;

/// `−α_t (1 − p_t)^γ ln p_t` with `α_t = α` for positives and `1 − α` for
/// negatives.
pub fn focal_loss<T: Scalar>(p: T, positive: bool, cfg: &FocalConfig) -> T {
    let lo = T::of(PROB_CLAMP);
    let p = p.max(lo).min(T::one() - lo);
    let (pt, at) = if positive {
        (p, T::of(cfg.alpha))
    } else {
        (T::one() - p, T::of(1.0 - cfg.alpha))
    };
    -at * (T::one() - pt).powf(T::of(cfg.gamma)) * pt.ln()
}

/// Focal loss of `sigmoid(z)` and its derivative with respect to `z`.
pub fn focal_from_logit<T: Scalar>(z: T, positive: bool, cfg: &FocalConfig) -> (T, T) {
    let lo = T::of(PROB_CLAMP);
    let raw = sigmoid(z);
    let clamped = raw < lo || raw > T::one() - lo;
    let p = raw.max(lo).min(T::one() - lo);
    let loss = focal_loss(p, positive, cfg);
    if clamped {
        return (loss, T::zero());
    }
    let g = T::of(cfg.gamma);
    let one = T::one();
    let grad = if positive {
        let a = T::of(cfg.alpha);
        a * (one - p).powf(g) * (g * p * p.ln() - (one - p))
    } else {
        let a = T::of(1.0 - cfg.alpha);
        a * p.powf(g) * (p - g * (one - p) * (one - p).ln())
    };
    (loss, grad)
}

/// Smooth-L1 with unit transition point and its derivative.
pub fn smooth_l1<T: Scalar>(d: T) -> (T, T) {
    if d.abs() < T::one() {
        (T::of(0.5) * d * d, d)
    } else {
        (d.abs() - T::of(0.5), d.signum())
    }
}

/// Components of one detection-loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    /// Normalized focal term.
    pub classification: f64,
    /// Normalized, unweighted smooth-L1 term.
    pub regression: f64,
    pub n_positive: usize,
}

/// Loss and gradients for a batch. Both terms are summed over the batch and
/// divided by `max(1, positives in the batch)`.
pub fn detection_loss_terms<T: Scalar>(
    logits: &Tensor<T>,
    offsets: &Tensor<T>,
    matches: &[MatchResult<T>],
    focal: &FocalConfig,
    box_weight: f64,
) -> Result<(LossParts, Vec<T>, Vec<T>)> {
    let (b, a) = match logits.shape() {
        [b, a] => (*b, *a),
        s => return Err(Error::shape("detection_loss", format!("logits {s:?}, expected [B, A]"))),
    };
    if offsets.shape() != [b, a, 4] {
        return Err(Error::shape(
            "detection_loss",
            format!("offsets {:?}, expected [{b}, {a}, 4]", offsets.shape()),
        ));
    }
    if matches.len() != b || matches.iter().any(|m| m.n_anchors() != a) {
        return Err(Error::shape(
            "detection_loss",
            format!("{} match results for a batch of {b} × {a} anchors", matches.len()),
        ));
    }
    let npos: usize = matches.iter().map(MatchResult::n_positive).sum();
    let norm = T::of(npos.max(1) as f64);
    let w = T::of(box_weight);
    let mut cls = T::zero();
    let mut reg = T::zero();
    let mut g_logits = vec![T::zero(); b * a];
    let mut g_offsets = vec![T::zero(); b * a * 4];
    let (lz, lo) = (logits.data(), offsets.data());
    for (i, m) in matches.iter().enumerate() {
        for j in 0..a {
            let k = i * a + j;
            let (l, d) = focal_from_logit(lz[k], m.assigned[j].is_some(), focal);
            cls = cls + l;
            g_logits[k] = d / norm;
            if m.assigned[j].is_some() {
                for c in 0..4 {
                    let (l, d) = smooth_l1(lo[k * 4 + c] - m.targets[j][c]);
                    reg = reg + l;
                    g_offsets[k * 4 + c] = w * d / norm;
                }
            }
        }
    }
    let cls = (cls / norm).to_f64_lossy();
    let reg = (reg / norm).to_f64_lossy();
    let parts = LossParts {
        total: cls + box_weight * reg,
        classification: cls,
        regression: reg,
        n_positive: npos,
    };
    Ok((parts, g_logits, g_offsets))
}

/// Record the detection loss as a single graph node over `logits` `[B, A]`
/// and `offsets` `[B, A, 4]`.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    offsets: Var,
    matches: &[MatchResult<T>],
    focal: &FocalConfig,
    box_weight: f64,
) -> Result<(Var, LossParts)> {
    let (parts, gl, go) =
        detection_loss_terms(g.value(logits), g.value(offsets), matches, focal, box_weight)?;
    let v = g.fused_scalar(&[logits, offsets], T::of(parts.total), vec![gl, go])?;
    Ok((v, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_examples() {
        let cfg = FocalConfig::default();
        let v: f64 = focal_loss(0.5, true, &cfg);
        assert!((v - 0.25 * 0.5f64.powi(5) * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.0054152).abs() < 1e-7);
        let ce = FocalConfig { alpha: 0.25, gamma: 0.0 };
        assert!((focal_loss(0.5, true, &ce) - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!(focal_loss(1.0 - 1e-12, true, &cfg) < 1e-30);
        assert!(focal_loss(0.0f64, true, &cfg).is_finite());
    }

    #[test]
    fn reduces_to_cross_entropy() {
        let cfg = FocalConfig { alpha: 1.0, gamma: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p: f64 = rng.gen_range(0.001..0.999);
            assert!((focal_loss(p, true, &cfg) + p.ln()).abs() < 1e-12);
        }
        // the negative class carries weight 1 − α; with α = 1 it vanishes
        let half = FocalConfig { alpha: 0.5, gamma: 0.0 };
        let p = 0.3f64;
        assert!((focal_loss(p, false, &half) + 0.5 * (1.0 - p).ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_decreases_in_pt() {
        let cfg = FocalConfig::default();
        let mut last = f64::INFINITY;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            let v = focal_loss(p, true, &cfg);
            assert!(v >= 0.0 && v < last);
            last = v;
        }
    }

    #[test]
    fn logit_derivative_matches_differences() {
        for cfg in [FocalConfig::default(), FocalConfig { alpha: 0.7, gamma: 0.0 }] {
            for &z in &[-6.0f64, -1.3, 0.0, 0.4, 2.5, 7.0] {
                for pos in [true, false] {
                    let h = 1e-6f64;
                    let (_, d) = focal_from_logit(z, pos, &cfg);
                    let fd = (focal_from_logit(z + h, pos, &cfg).0
                        - focal_from_logit(z - h, pos, &cfg).0)
                        / (2.0 * h);
                    assert!((d - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "{z} {pos} {d} {fd}");
                }
            }
        }
    }

    fn instance(b: usize, a: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Vec<MatchResult<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[b, a], |_| rng.gen_range(-3.0..3.0));
        let offsets = Tensor::from_fn(&[b, a, 4], |_| rng.gen_range(-2.0..2.0));
        let matches = (0..b)
            .map(|_| {
                let mut m = MatchResult::background(a);
                for j in 0..a {
                    if rng.gen_bool(0.3) {
                        m.assigned[j] = Some(0);
                        m.targets[j] = [(); 4].map(|_| rng.gen_range(-1.5..1.5));
                    }
                }
                m
            })
            .collect();
        (logits, offsets, matches)
    }

    #[test]
    fn background_limit_and_optimum() {
        let cfg = FocalConfig::default();
        let logits = Tensor::full(&[1, 20], -30.0);
        let offsets = Tensor::zeros(&[1, 20, 4]);
        let m = MatchResult::background(20);
        let (p, _, _) = detection_loss_terms(&logits, &offsets, &[m], &cfg, 1.0).unwrap();
        assert!(p.total < 1e-12);

        let (_, offsets, matches) = instance(2, 30, 1);
        let mut exact = offsets.clone();
        let mut logits = Tensor::zeros(&[2, 30]);
        for (i, m) in matches.iter().enumerate() {
            for j in 0..30 {
                logits.data_mut()[i * 30 + j] = if m.assigned[j].is_some() { 30.0 } else { -30.0 };
                for c in 0..4 {
                    exact.data_mut()[(i * 30 + j) * 4 + c] = m.targets[j][c];
                }
            }
        }
        let (p, _, _) = detection_loss_terms(&logits, &exact, &matches, &cfg, 1.0).unwrap();
        assert!(p.total <= 1e-4, "{}", p.total);
    }

    #[test]
    fn box_weight_scales_regression_exactly() {
        let (l, o, m) = instance(2, 25, 2);
        let cfg = FocalConfig::default();
        let (a, _, ga) = detection_loss_terms(&l, &o, &m, &cfg, 1.0).unwrap();
        let (b, _, gb) = detection_loss_terms(&l, &o, &m, &cfg, 2.0).unwrap();
        assert_eq!(a.regression, b.regression);
        assert_eq!(a.classification, b.classification);
        assert!((b.total - b.classification - 2.0 * (a.total - a.classification)).abs() < 1e-12);
        assert!(ga.iter().zip(&gb).all(|(x, y)| *y == 2.0 * x));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (l, o, m) = instance(2, 10, 3);
        let cfg = FocalConfig::default();
        assert!(detection_loss_terms(&l, &Tensor::zeros(&[2, 10, 3]), &m, &cfg, 1.0).is_err());
        assert!(detection_loss_terms(&l, &o, &m[..1], &cfg, 1.0).is_err());
        assert!(detection_loss_terms(&Tensor::zeros(&[20]), &o, &m, &cfg, 1.0).is_err());
    }

    #[test]
    fn fused_gradient_checks() {
        for seed in 0..3 {
            let (l, o, m) = instance(2, 12, 10 + seed);
            let cfg = FocalConfig::default();
            let e = gradient_check(&[l, o], 1e-4, None, seed, |g, v| {
                Ok(detection_loss(g, v[0], v[1], &m, &cfg, 1.0)?.0)
            })
            .unwrap();
            assert!(e <= 1e-3, "{e}");
        }
    }
}
