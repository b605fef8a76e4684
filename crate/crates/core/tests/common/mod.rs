#![allow(dead_code)]

// Independent dense reference implementations on nested vectors. Nothing here
// touches the tape.

use semaffine_core::nn::{
    AttentionParams, DecoderBlockParams, EncoderBlockParams, FeedForwardParams, LayerNormParams,
    LinearParams, ParamStore,
};
use semaffine_core::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows());
    let mut m: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        assert_eq!(row.len(), b.cols());
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b.at(r, c)).abs());
        }
    }
    m
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn linear(store: &ParamStore, p: &LinearParams, x: &Mat) -> Mat {
    let w = store.get(p.weight);
    let b = store.get(p.bias).data();
    x.iter()
        .map(|row| {
            (0..p.out_dim)
                .map(|o| {
                    let mut s = b[o];
                    for (i, v) in row.iter().enumerate() {
                        s += v * w.at(o, i);
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Per-head outputs before concatenation.
pub fn attention_heads(store: &ParamStore, p: &AttentionParams, q_in: &Mat, kv_in: &Mat) -> Vec<Mat> {
    p.heads
        .iter()
        .map(|h| {
            let q = linear(store, &h.query, q_in);
            let k = linear(store, &h.key, kv_in);
            let v = linear(store, &h.value, kv_in);
            q.iter()
                .map(|qi| {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| {
                            qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                                / (p.d_k as f64).sqrt()
                        })
                        .collect();
                    let w = softmax(&scores);
                    (0..p.d_k)
                        .map(|c| w.iter().zip(&v).map(|(wj, vj)| wj * vj[c]).sum())
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn attention(store: &ParamStore, p: &AttentionParams, q_in: &Mat, kv_in: &Mat) -> Mat {
    let heads = attention_heads(store, p, q_in, kv_in);
    let cat: Mat = (0..q_in.len())
        .map(|r| heads.iter().flat_map(|h| h[r].iter().copied()).collect())
        .collect();
    linear(store, &p.output, &cat)
}

pub fn layer_norm(store: &ParamStore, p: &LayerNormParams, x: &Mat) -> Mat {
    let g = store.get(p.gain).data();
    let b = store.get(p.bias).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mu) * inv * g[c] + b[c])
                .collect()
        })
        .collect()
}

pub fn plain_norm(x: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            row.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

pub fn feed_forward(store: &ParamStore, p: &FeedForwardParams, x: &Mat) -> Mat {
    let h: Mat = linear(store, &p.expand, x)
        .into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect();
    linear(store, &p.contract, &h)
}

pub fn encoder(store: &ParamStore, p: &EncoderBlockParams, x: &Mat) -> Mat {
    let a = attention(store, &p.attn, x, x);
    let x1 = layer_norm(store, &p.norm1, &add(x, &a));
    let f = feed_forward(store, &p.ff, &x1);
    layer_norm(store, &p.norm2, &add(&x1, &f))
}

pub fn decoder(store: &ParamStore, p: &DecoderBlockParams, q: &Mat, mem: &Mat) -> Mat {
    let a = attention(store, &p.self_attn, q, q);
    let x1 = layer_norm(store, &p.norm1, &add(q, &a));
    let c = attention(store, &p.cross_attn, &x1, mem);
    let x2 = layer_norm(store, &p.norm2, &add(&x1, &c));
    let f = feed_forward(store, &p.ff, &x2);
    layer_norm(store, &p.norm3, &add(&x2, &f))
}
