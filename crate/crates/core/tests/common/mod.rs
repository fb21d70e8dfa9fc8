#![allow(dead_code)]

use mmet_core::numerics::{Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central finite differences against the tape's backward pass. Returns the
/// largest per-input relative error `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>, TensorError>,
{
    let analytic: Vec<Vec<f64>> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .map(|t| g.leaf(t.clone().with_requires_grad(true)).unwrap())
            .collect();
        let loss = f(&g, &vars).unwrap();
        let grads = g.backward(loss).unwrap();
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    };
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone()).unwrap()).collect();
        f(&g, &vars).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_STEP;
            let down = eval(&xs);
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic[i]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = (norm(&analytic[i]) + norm(&numeric)).max(1e-12);
        worst = worst.max(diff / denom);
    }
    worst
}

/// Unwraps the tensor error inside a crate error for use in `gradcheck` closures.
pub fn tensor_err(e: mmet_core::Error) -> TensorError {
    match e {
        mmet_core::Error::Tensor(t) => t,
        other => TensorError::Usage(other.to_string()),
    }
}
