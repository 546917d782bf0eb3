//! Reference implementations shared by the integration tests. They use
//! plain nested loops over `Vec<f64>` rows and never call the layer library.
#![allow(dead_code)]

use gfk_core::layers::*;
use gfk_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn linear(rng: &mut ChaCha8Rng, i: usize, o: usize, bias: bool) -> Linear<Tensor> {
    Linear { weight: rand_tensor(rng, vec![i, o], 0.5), bias: bias.then(|| rand_tensor(rng, vec![o], 0.5)) }
}

pub fn mha(rng: &mut ChaCha8Rng, d: usize, heads: usize, full: bool) -> MhaWeights<Tensor> {
    MhaWeights {
        heads,
        query: linear(rng, d, d, full),
        key: linear(rng, d, d, full),
        value: linear(rng, d, d, full),
        output: full.then(|| linear(rng, d, d, true)),
    }
}

pub fn gnn(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> GnnWeights<Tensor> {
    GnnWeights { mha: mha(rng, d, heads, false), bias: Some(RelationBias { values: rand_tensor(rng, vec![heads, 3], 1.0) }) }
}

pub fn layer(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> TransformerLayerWeights<Tensor> {
    let ln = |rng: &mut ChaCha8Rng| LayerNormWeights {
        gamma: Tensor::new(vec![d], (0..d).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap(),
        beta: rand_tensor(rng, vec![d], 0.2),
    };
    TransformerLayerWeights {
        attention: mha(rng, d, heads, true),
        attention_norm: ln(rng),
        ffn_in: linear(rng, d, 4 * d, true),
        ffn_out: linear(rng, 4 * d, d, true),
        ffn_norm: ln(rng),
    }
}

pub fn rows_of(t: &Tensor) -> Rows {
    let d = t.shape()[1];
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

pub fn flatten(r: &Rows) -> Vec<f64> {
    r.iter().flatten().copied().collect()
}

// ---- reference implementations ------------------------------------------

pub fn ref_linear(x: &Rows, w: &Linear<Tensor>) -> Rows {
    let (i, o) = (w.weight.shape()[0], w.weight.shape()[1]);
    x.iter()
        .map(|row| {
            (0..o)
                .map(|c| {
                    let mut s = w.bias.as_ref().map_or(0.0, |b| b.data()[c]);
                    for r in 0..i {
                        s += row[r] * w.weight.data()[r * o + c];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

/// Per-head loop; masked keys are dropped from the sum entirely.
pub fn ref_mha(q_in: &Rows, kv_in: &Rows, w: &MhaWeights<Tensor>, mask: &[bool], bias: Option<&dyn Fn(usize, usize, usize) -> f64>) -> Rows {
    let d = q_in[0].len();
    let dh = d / w.heads;
    let (q, k, v) = (ref_linear(q_in, &w.query), ref_linear(kv_in, &w.key), ref_linear(kv_in, &w.value));
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..w.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let mut scores = Vec::new();
            for t in 0..k.len() {
                if mask[t] {
                    continue;
                }
                let dot: f64 = cols.clone().map(|c| q[i][c] * k[t][c]).sum();
                let b = bias.map_or(0.0, |f| f(h, i, t));
                scores.push((t, dot / (dh as f64).sqrt() + b));
            }
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
            for &(t, s) in &scores {
                let p = (s - max).exp() / z;
                for c in cols.clone() {
                    out[i][c] += p * v[t][c];
                }
            }
        }
    }
    match &w.output {
        Some(o) => ref_linear(&out, o),
        None => out,
    }
}

pub fn ref_layer_norm(x: &Rows, w: &LayerNormWeights<Tensor>, eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + eps).sqrt() * w.gamma.data()[c] + w.beta.data()[c])
                .collect()
        })
        .collect()
}

pub fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn ref_layer(h: &Rows, msg: Option<&[f64]>, w: &TransformerLayerWeights<Tensor>, mask: &[bool], eps: f64) -> Rows {
    let (kv, kv_mask): (Rows, Vec<bool>) = match msg {
        Some(m) => {
            let mut kv = vec![m.to_vec()];
            kv.extend(h.iter().cloned());
            let mut km = vec![false];
            km.extend_from_slice(mask);
            (kv, km)
        }
        None => (h.clone(), mask.to_vec()),
    };
    let a = ref_mha(h, &kv, &w.attention, &kv_mask, None);
    let mid = ref_layer_norm(&add_rows(h, &a), &w.attention_norm, eps);
    let hidden: Rows = ref_linear(&mid, &w.ffn_in).into_iter().map(|r| r.into_iter().map(ref_gelu).collect()).collect();
    let ffn = ref_linear(&hidden, &w.ffn_out);
    ref_layer_norm(&add_rows(&mid, &ffn), &w.ffn_norm, eps)
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
