//! Independent oracles shared by the integration tests.
//!
//! Everything here works on plain `Vec<Vec<f64>>` in column-vector form
//! (`W · x` with `W` stored as rows), written out loop by loop so it shares
//! no code with the graph engine.

#![allow(dead_code)]

use rand::Rng;
use star_dst::tensor::{Graph, Tensor, Var};

pub type Mat = Vec<Vec<f64>>;

pub fn rand_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

pub fn rand_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn tensor(m: &Mat) -> Tensor<f64> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    Tensor::new(vec![rows, cols], m.iter().flatten().copied().collect()).unwrap()
}

pub fn rows_of(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut s = 0.0;
            for k in 0..x.len() {
                s += row[k] * x[k];
            }
            s
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Rows `[from, to)` of `w`.
fn block(w: &Mat, from: usize, to: usize) -> Mat {
    w[from..to].to_vec()
}

/// `MultiHead(Q, K, Z) = W_O [head_1; …; head_N]` with
/// `head_n = Σᵢ τᵢ W_Zⁿ zᵢ`, `τ = softmax((W_Qⁿ q)ᵀ (W_Kⁿ kᵢ) / √(d/N))`.
/// One output column per query column.
#[allow(clippy::too_many_arguments)]
pub fn mha(q: &Mat, k: &Mat, z: &Mat, wq: &Mat, wk: &Mat, wz: &Mat, wo: &Mat, heads: usize) -> Mat {
    let d = wq.len();
    let dh = d / heads;
    let dz = wz.len() / heads;
    let mut out = Vec::new();
    for qc in q {
        let mut cat = Vec::new();
        for n in 0..heads {
            let wqn = block(wq, n * dh, (n + 1) * dh);
            let wkn = block(wk, n * dh, (n + 1) * dh);
            let wzn = block(wz, n * dz, (n + 1) * dz);
            let qn = matvec(&wqn, qc);
            let scores: Vec<f64> = k
                .iter()
                .map(|kc| dot(&qn, &matvec(&wkn, kc)) / (dh as f64).sqrt())
                .collect();
            let tau = softmax(&scores);
            let mut head = vec![0.0; dz];
            for (i, zc) in z.iter().enumerate() {
                let zn = matvec(&wzn, zc);
                for e in 0..dz {
                    head[e] += tau[i] * zn[e];
                }
            }
            cat.extend(head);
        }
        out.push(matvec(wo, &cat));
    }
    out
}

pub fn ffn(x: &[f64], w1: &Mat, b1: &[f64], w2: &Mat, b2: &[f64]) -> Vec<f64> {
    let mut h = matvec(w1, x);
    for i in 0..h.len() {
        h[i] = (h[i] + b1[i]).max(0.0);
    }
    let mut o = matvec(w2, &h);
    for i in 0..o.len() {
        o[i] += b2[i];
    }
    o
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (0..x.len())
        .map(|i| (x[i] - mean) / (var + eps).sqrt() * gain[i] + bias[i])
        .collect()
}

/// Distribution over candidates: `exp(-‖γ - h_V‖) / Σ exp(-‖γ - h_V'‖)`.
pub fn value_distribution(gamma: &[f64], candidates: &Mat) -> Vec<f64> {
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let mut s = 0.0;
            for i in 0..gamma.len() {
                s += (gamma[i] - c[i]).powi(2);
            }
            -s.sqrt()
        })
        .collect();
    softmax(&scores)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn mat_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

/// Relative error with a small floor, so exact zeros compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Builds `f` on fresh graphs and compares the analytic gradient of
/// `Σ wᵢ f(x)ᵢ` (fixed random weights) with central differences over every
/// input element. Returns the worst relative error.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let weights = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        let n = g.value(out).numel();
        (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect::<Vec<f64>>()
    };
    let scalar = |g: &mut Graph<f64>, vars: &[Var]| -> Var {
        let out = f(g, vars);
        let shape = g.value(out).shape().to_vec();
        let w = g.constant(Tensor::new(shape, weights.clone()).unwrap());
        let p = g.mul(out, w).unwrap();
        g.sum(p)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = scalar(&mut g, &vars);
    g.backward(root).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let root = scalar(&mut g, &vars);
        g.value(root).data()[0]
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][e], numeric));
        }
    }
    worst
}
