//! Straight-line recomputations of the network blocks on plain vectors, used
//! as oracles against the graph implementation.

use crate::autodiff::ops::{project, reject, softmax};
use crate::autodiff::ParamStore;
use crate::layers::{AdditiveAttention, Dense, Mlp, MultiHeadSelfAttention};
use crate::tensor::Tensor;
use crate::uipn::{ProjectionMode, Uipn};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x W` for a row vector and a row-major `[in, out]` matrix.
pub fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (n, m) = w.dims2();
    assert_eq!(x.len(), n);
    (0..m).map(|j| (0..n).map(|i| x[i] * w.get(&[i, j])).sum()).collect()
}

pub fn dense(store: &ParamStore, layer: &Dense, x: &[f64]) -> Vec<f64> {
    let mut y = vecmat(x, store.get(layer.weight));
    if let Some(b) = layer.bias {
        for (v, b) in y.iter_mut().zip(store.get(b).data()) {
            *v += b;
        }
    }
    y
}

pub fn mlp(store: &ParamStore, net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    for (i, layer) in net.layers.iter().enumerate() {
        h = dense(store, layer, &h);
        if i + 1 < net.layers.len() || net.final_relu {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

pub fn attention_logits(store: &ParamStore, att: &AdditiveAttention, query: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let wq = vecmat(query, store.get(att.query_map.weight));
    let b = store.get(att.bias).data();
    let z = store.get(att.z).data();
    rows.iter()
        .map(|r| {
            let wk = vecmat(r, store.get(att.key_map.weight));
            let hid: Vec<f64> = (0..wk.len()).map(|j| (wq[j] + wk[j] + b[j]).tanh()).collect();
            dot(&hid, z).max(0.0)
        })
        .collect()
}

pub fn attention_weights(store: &ParamStore, att: &AdditiveAttention, query: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    softmax(&attention_logits(store, att, query, rows))
}

pub fn pool(weights: &[f64], rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|c| weights.iter().zip(rows).map(|(w, r)| w * r[c]).sum()).collect()
}

pub fn mhsa(store: &ParamStore, m: &MultiHeadSelfAttention, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let t = rows.len();
    let d = m.dim;
    let dh = d / m.heads;
    let q: Vec<Vec<f64>> = rows.iter().map(|r| vecmat(r, store.get(m.query.weight))).collect();
    let k: Vec<Vec<f64>> = rows.iter().map(|r| vecmat(r, store.get(m.key.weight))).collect();
    let v: Vec<Vec<f64>> = rows.iter().map(|r| vecmat(r, store.get(m.value.weight))).collect();
    let mut concat = vec![vec![0.0; d]; t];
    for head in 0..m.heads {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| dot(&q[i][cols.clone()], &k[j][cols.clone()]) / (dh as f64).sqrt())
                .collect();
            let a = softmax(&logits);
            for c in cols.clone() {
                concat[i][c] = (0..t).map(|j| a[j] * v[j][c]).sum();
            }
        }
    }
    concat.iter().map(|r| vecmat(r, store.get(m.output.weight))).collect()
}

pub fn uipn(store: &ParamStore, u: &Uipn, behaviors: &[Vec<f64>], scenario: &[f64], item: &[f64]) -> Vec<f64> {
    if behaviors.is_empty() {
        return vec![0.0; u.config.proj_dim];
    }
    let fs = vecmat(scenario, store.get(u.scenario_map.weight));
    let purified: Vec<Vec<f64>> = behaviors
        .iter()
        .map(|e| {
            let f = vecmat(e, store.get(u.behavior_map.weight));
            match u.config.mode {
                ProjectionMode::Onto => project(&f, &fs).unwrap(),
                ProjectionMode::Complement => reject(&f, &fs).unwrap(),
            }
        })
        .collect();
    let refined = mhsa(store, &u.mhsa, &purified);
    let alpha = attention_weights(store, &u.attention, item, &refined);
    pool(&alpha, &refined)
}
