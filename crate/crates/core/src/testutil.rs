//! Plain-loop reference implementations used as oracles in unit tests.

use crate::tensor::nn::{Block, LayerNorm, Linear, LN_EPS};
use crate::tensor::{ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn from_tensor(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| (0..n).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}


pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    use crate::tensor::{GELU_A, GELU_C};
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn linear(store: &ParamStore<f64>, l: &Linear, x: &Mat) -> Mat {
    let w = from_tensor(store.get(l.weight));
    let mut y = matmul(x, &w);
    if let Some(b) = l.bias {
        let b = store.get(b).data();
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn layer_norm(store: &ParamStore<f64>, ln: &LayerNorm, x: &Mat) -> Mat {
    let (g, b) = (store.get(ln.gain).data(), store.get(ln.bias).data());
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(c, v)| (v - mean) / (var + LN_EPS).sqrt() * g[c] + b[c]).collect()
        })
        .collect()
}

/// Single-head block forward; `causal` hides future rows.
pub fn block(store: &ParamStore<f64>, blk: &Block, x: &Mat, causal: bool) -> Mat {
    assert_eq!(blk.attn.heads, 1, "oracle handles one head");
    let h = layer_norm(store, &blk.ln_attn, x);
    let q = linear(store, &blk.attn.query, &h);
    let k = linear(store, &blk.attn.key, &h);
    let v = linear(store, &blk.attn.value, &h);
    let scale = 1.0 / (blk.attn.dim as f64).sqrt();
    let mut attended = Vec::new();
    for i in 0..x.len() {
        let visible = if causal { i + 1 } else { x.len() };
        let scores: Vec<f64> = (0..visible).map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() * scale).collect();
        let p = softmax_row(&scores);
        let dim = v[0].len();
        attended.push((0..dim).map(|c| (0..visible).map(|j| p[j] * v[j][c]).sum()).collect());
    }
    let x = add(x, &linear(store, &blk.attn.out, &attended));
    let h = layer_norm(store, &blk.ln_ff, &x);
    let up: Mat = linear(store, &blk.ff.up, &h).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    add(&x, &linear(store, &blk.ff.down, &up))
}

pub fn assert_close(a: &Mat, b: &Tensor<f64>, tol: f64) {
    assert_eq!((a.len(), a[0].len()), (b.rows(), b.cols()));
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            assert!((v - b.at(r, c)).abs() < tol, "({r},{c}): oracle {v} vs {}", b.at(r, c));
        }
    }
}
