//! Central finite-difference verification of backpropagated gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn evaluate<T, F>(inputs: &[Tensor<T>], f: &F, backward: bool) -> Result<(T, Graph<T>, Vec<Var>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::shape(
            "gradient_check",
            format!("target must be scalar, got {:?}", g.value(out).shape()),
        ));
    }
    let v = g.value(out).item();
    if backward {
        g.backward(out);
    }
    Ok((v, g, vars))
}

/// Maximum over checked coordinates of
/// `|g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
///
/// `f` builds a scalar from graph leaves created for `inputs`. With
/// `samples = Some(k)`, only `k` coordinates drawn (seeded) across all inputs
/// are perturbed.
pub fn gradient_check<T, F>(
    inputs: &[Tensor<T>],
    eps: f64,
    samples: Option<usize>,
    seed: u64,
    f: F,
) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let (_, g, vars) = evaluate(inputs, &f, true)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    drop(g);

    let offsets: Vec<usize> = inputs
        .iter()
        .scan(0, |acc, t| {
            let o = *acc;
            *acc += t.numel();
            Some(o)
        })
        .collect();
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let coords: Vec<usize> = match samples {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, k).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..total).collect(),
    };

    let mut worst = 0.0f64;
    let mut perturbed: Vec<Tensor<T>> = inputs.to_vec();
    for flat in coords {
        let which = offsets.partition_point(|&o| o <= flat) - 1;
        let idx = flat - offsets[which];
        let orig = inputs[which].data()[idx];
        perturbed[which].data_mut()[idx] = orig + T::of(eps);
        let (plus, _, _) = evaluate(&perturbed, &f, false)?;
        perturbed[which].data_mut()[idx] = orig - T::of(eps);
        let (minus, _, _) = evaluate(&perturbed, &f, false)?;
        perturbed[which].data_mut()[idx] = orig;
        let fd = (plus.to_f64_lossy() - minus.to_f64_lossy()) / (2.0 * eps);
        let ad = analytic[which][idx];
        let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_fn(&[7], |i| i as f64 * 0.25 - 1.0);
        let w = Tensor::from_fn(&[7], |i| 1.0 + i as f64);
        let e = gradient_check(&[x], 1e-5, None, 0, |g, v| {
            let c = g.input(w.clone());
            let p = g.mul(v[0], c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(e <= 1e-10, "{e}");
    }

    #[test]
    fn non_scalar_target_rejected() {
        let x = Tensor::<f64>::zeros(&[3]);
        assert!(gradient_check(&[x], 1e-5, None, 0, |g, v| Ok(g.relu(v[0]))).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // the fused node reports twice the true derivative of sum(x)
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let e = gradient_check(&[x], 1e-5, None, 0, |g, v| {
            let s: f64 = g.value(v[0]).data().iter().sum();
            g.fused_scalar(&[v[0]], s, vec![vec![2.0; 4]])
        })
        .unwrap();
        assert!(e > 0.3);
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::from_fn(&[1000], |i| (i as f64).sin());
        let e = gradient_check(&[x], 1e-5, Some(20), 3, |g, v| {
            let s = g.sigmoid(v[0]);
            Ok(g.sum(s))
        })
        .unwrap();
        assert!(e <= 1e-6);
    }
}
