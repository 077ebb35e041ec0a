//! Shared generators for the integration tests.

#![allow(dead_code)]

use catmerge::netexec::{Activation, Batch, ModelSpec, Targets};
use catmerge::rng::CounterRng;
use catmerge::{Checkpoint, Matrix, Tensor};

pub fn gaussian(rows: usize, cols: usize, rng: &mut CounterRng) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normals(rows * cols)).unwrap()
}

/// `d × c` with orthonormal columns (Gram–Schmidt on Gaussian columns).
pub fn orthonormal(d: usize, c: usize, rng: &mut CounterRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(c);
    while cols.len() < c {
        let mut v = rng.normals(d);
        for _ in 0..2 {
            for b in &cols {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut m = Matrix::zeros(d, c);
    for (j, col) in cols.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            m[(r, j)] = v;
        }
    }
    m
}

pub fn symmetric(n: usize, rng: &mut CounterRng) -> Matrix {
    gaussian(n, n, rng).symmetrized().unwrap()
}

/// A checkpoint shaped like `like` with `N(0, scale²)` entries.
pub fn perturbation(like: &Checkpoint, scale: f64, rng: &mut CounterRng) -> Checkpoint {
    let mut out = Checkpoint::new();
    for (name, e) in like.iter() {
        let data = (0..e.tensor.numel()).map(|_| scale * rng.normal()).collect();
        out.insert(name, e.kind, Tensor::from_f64(e.tensor.shape().to_vec(), data).unwrap()).unwrap();
    }
    out
}

pub fn labeled(n: usize, d: usize, classes: usize, rng: &mut CounterRng) -> Batch {
    let x = gaussian(n, d, rng);
    let y = (0..n).map(|_| rng.below(classes as u64) as u32).collect();
    Batch::new(x, Some(Targets::Labels(y))).unwrap()
}

/// A small random network: `(spec, W₀, Tₖ, Tᵢ, data)`.
pub fn random_instance(seed: u64, activation: Activation) -> (ModelSpec, Checkpoint, Checkpoint, Checkpoint, Batch) {
    let mut rng = CounterRng::new(seed);
    let spec = ModelSpec::mlp(5, 7, 3, 3, true, activation);
    let w0 = spec.init_params(&mut rng).unwrap();
    let w0 = perturbed(&w0, 0.1, &mut rng);
    let t_k = perturbation(&w0, 0.3, &mut rng);
    let t_i = perturbation(&w0, 0.3, &mut rng);
    let data = labeled(12, 5, 3, &mut rng);
    (spec, w0, t_k, t_i, data)
}

/// `c + N(0, scale²)`, elementwise.
pub fn perturbed(c: &Checkpoint, scale: f64, rng: &mut CounterRng) -> Checkpoint {
    catmerge::merging::add_scaled(c, &perturbation(c, scale, rng), 1.0).unwrap()
}

/// All subsets of `0..d` with at most `c` elements, as masks.
pub fn masks_up_to(d: usize, c: usize) -> Vec<Vec<bool>> {
    (0u32..1 << d)
        .filter(|m| m.count_ones() as usize <= c)
        .map(|m| (0..d).map(|z| m >> z & 1 == 1).collect())
        .collect()
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub const ACTIVATIONS: [Activation; 4] = [Activation::Relu, Activation::Gelu, Activation::Tanh, Activation::Identity];
