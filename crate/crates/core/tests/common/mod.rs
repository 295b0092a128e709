#![allow(dead_code)]

use mmdg_core::autodiff::{Graph, Tensor, Var};
use mmdg_core::preprocess::{PreparedSample, Preprocessor};
use mmdg_core::synthgen::{self, NoiseConfig};
use mmdg_core::Execution;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller keeps the helper free of distribution crates.
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn randn2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    randn(rng, &[r, c]).into_dimensionality().unwrap()
}

/// Brute-force biased MMD: three double loops over a Gaussian kernel sum.
pub fn mmd_oracle(x: &Array2<f64>, y: &Array2<f64>, sigmas: &[f64]) -> f64 {
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let mut d2 = 0.0;
        for i in 0..a.len() {
            d2 += (a[i] - b[i]) * (a[i] - b[i]);
        }
        sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>()
    };
    let mean = |p: &Array2<f64>, q: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..p.nrows() {
            for j in 0..q.nrows() {
                s += k(p.row(i), q.row(j));
            }
        }
        s / (p.nrows() * q.nrows()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

/// Brute-force Frobenius norm of the cross-covariance, element by element.
pub fn cov_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for p in 0..a.ncols() {
        let ma = (0..n).map(|i| a[[i, p]]).sum::<f64>() / n as f64;
        for q in 0..b.ncols() {
            let mb = (0..n).map(|i| b[[i, q]]).sum::<f64>() / n as f64;
            let mut c = 0.0;
            for i in 0..n {
                c += (a[[i, p]] - ma) * (b[[i, q]] - mb);
            }
            c /= (n - 1) as f64;
            total += c * c;
        }
    }
    total.sqrt()
}

/// Analytic and central-difference gradients of a scalar graph function of
/// `inputs`, restricted to `coords` (input index, flat element index).
/// Returns the norm-wise relative error `|a - n| / max(|a|, |n|)`.
pub fn grad_check<F>(inputs: &[Tensor], coords: &[(usize, usize)], h: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|v| g.variable(v.clone())).collect();
        let out = build(&mut g, &vars);
        (g, vars, out)
    };
    let (g, vars, out) = eval(inputs);
    let grads = g.backward(out);
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for &(t, e) in coords {
        let a = grads.get(vars[t]).map_or(0.0, |gr| gr.as_slice_memory_order().unwrap()[e]);
        let mut plus = inputs.to_vec();
        plus[t].as_slice_memory_order_mut().unwrap()[e] += h;
        let mut minus = inputs.to_vec();
        minus[t].as_slice_memory_order_mut().unwrap()[e] -= h;
        let (gp, _, op) = eval(&plus);
        let (gm, _, om) = eval(&minus);
        analytic.push(a);
        numeric.push((gp.scalar(op) - gm.scalar(om)) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}

/// All coordinates of every input.
pub fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs.iter().enumerate().flat_map(|(t, v)| (0..v.len()).map(move |e| (t, e))).collect()
}

pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Prepared (not normalised) samples for the given conditions.
pub fn prepared_corpus(conditions: &[&str], per_class: usize, seed: u64) -> Vec<PreparedSample> {
    let conds: Vec<_> = conditions.iter().map(|c| synthgen::standard_condition(c).expect("known")).collect();
    let corpus = synthgen::generate_corpus(
        Execution::default(),
        &conds,
        &synthgen::fault_classes(),
        per_class,
        seed,
        &NoiseConfig::default(),
    )
    .expect("generation");
    let raws: Vec<_> = corpus.into_iter().flat_map(|(_, _, v)| v).collect();
    Preprocessor::new().prepare_all(Execution::default(), &raws).expect("preprocessing")
}
