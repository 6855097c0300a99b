//! Shared test oracles. Everything here is independent of the code under test
//! except for the graph API used to evaluate a loss.
#![allow(dead_code)]

pub mod metrics;
pub mod mock;

use bicap_core::numerics::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

/// Relative error with an absolute floor so near-zero derivatives compare sensibly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn eval<F>(leaves: &[Tensor<f64>], f: &F) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t)).collect();
    let out = f(&mut g, &ids);
    g.value(out)[0]
}

/// Compares autodiff directional derivatives against central differences along
/// `directions` random unit directions; returns the worst relative error.
pub fn directional_check<F>(leaves: &[Tensor<f64>], f: F, directions: usize, seed: u64) -> f64
where
    F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
{
    let leaves: Vec<Tensor<f64>> = leaves.iter().map(|t| t.clone().with_grad(true)).collect();
    let grads: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| g.param(t)).collect();
        let out = f(&mut g, &ids);
        g.backward(out).expect("backward");
        ids.iter().map(|id| g.grad_or_zeros(*id)).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dir: Vec<Vec<f64>> = leaves
            .iter()
            .map(|t| (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let norm = dir.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(g, d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
            .sum::<f64>()
            / norm;
        let shifted = |sign: f64| -> Vec<Tensor<f64>> {
            leaves
                .iter()
                .zip(&dir)
                .map(|(t, d)| {
                    let data = t.data().iter().zip(d).map(|(v, dv)| v + sign * FD_STEP * dv / norm).collect();
                    Tensor::new(t.shape().to_vec(), data).unwrap().with_grad(true)
                })
                .collect()
        };
        let numeric = (eval(&shifted(1.0), &f) - eval(&shifted(-1.0), &f)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, numeric));
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Reduces any node to a scalar through a fixed random weighting.
pub fn weighted_sum(g: &mut Graph<'_, f64>, x: NodeId, seed: u64) -> NodeId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&mut rng, &shape, 1.0);
    let wn = g.input(w);
    let m = g.mul(x, wn).unwrap();
    g.sum(m)
}
