//! Small trainable building blocks shared by the interest and memory modules.
//!
//! Each block registers its parameters once and is then *bound* to a graph per
//! batch, so every sample in the batch reuses the same parameter nodes.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Glorot-uniform `[fan_in, fan_out]` matrix.
pub(crate) fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::matrix(
        fan_in,
        fan_out,
        (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

/// Applies `f` to `x` as a one-row matrix when `x` is a vector, and reshapes
/// the result back to a vector.
fn as_rows(g: &mut Graph, x: Var, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Var> {
    if g.shape(x).len() == 1 {
        let d = g.shape(x)[0];
        let row = g.reshape(x, &[1, d])?;
        let out = f(g, row)?;
        let w = g.shape(out)[1];
        g.reshape(out, &[w])
    } else {
        f(g, x)
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    weight: Var,
    bias: Option<Var>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.w"), glorot(rng, in_dim, out_dim)?)?;
        let bias = if with_bias {
            Some(store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<DenseVars> {
        Ok(DenseVars {
            weight: g.param(store, self.weight)?,
            bias: self.bias.map(|b| g.param(store, b)).transpose()?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

impl DenseVars {
    /// `x: [n, in]` or `[in]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        as_rows(g, x, |g, rows| {
            let y = g.matmul(rows, self.weight)?;
            match self.bias {
                Some(b) => g.add(y, b),
                None => Ok(y),
            }
        })
    }
}

/// Additive attention scoring a set of rows against one query vector:
/// `softmax_t( relu( zᵀ tanh(W_q q + W_k k_t + b) ) )`.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    pub query_map: Dense,
    pub key_map: Dense,
    pub bias: ParamId,
    pub z: ParamId,
    pub hidden: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    query_map: DenseVars,
    key_map: DenseVars,
    bias: Var,
    z: Var,
}

impl AdditiveAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        key_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let query_map = Dense::new(store, &format!("{name}.w_query"), query_dim, hidden, false, rng)?;
        let key_map = Dense::new(store, &format!("{name}.w_key"), key_dim, hidden, false, rng)?;
        let bias = store.add(format!("{name}.b"), Tensor::zeros(&[hidden]))?;
        let z = store.add(format!("{name}.z"), glorot(rng, hidden, 1)?)?;
        Ok(Self {
            query_map,
            key_map,
            bias,
            z,
            hidden,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<AttentionVars> {
        Ok(AttentionVars {
            query_map: self.query_map.bind(g, store)?,
            key_map: self.key_map.bind(g, store)?,
            bias: g.param(store, self.bias)?,
            z: g.param(store, self.z)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.query_map.param_ids();
        ids.extend(self.key_map.param_ids());
        ids.extend([self.bias, self.z]);
        ids
    }
}

impl AttentionVars {
    /// Pre-softmax scores `[T]` of `keys: [T, d_k]` against `query: [d_q]`.
    pub fn logits(&self, g: &mut Graph, query: Var, keys: Var) -> Result<Var> {
        let t = g.shape(keys)[0];
        if t == 0 {
            return Err(Error::InvalidArgument("attention over zero rows".into()));
        }
        let q = self.query_map.forward(g, query)?;
        let qb = g.add(q, self.bias)?;
        let k = self.key_map.forward(g, keys)?;
        let pre = g.add(k, qb)?;
        let h = g.tanh(pre)?;
        let s = g.matmul(h, self.z)?;
        let s = g.relu(s)?;
        g.reshape(s, &[t])
    }

    /// Normalized weights `[T]`.
    pub fn weights(&self, g: &mut Graph, query: Var, keys: Var) -> Result<Var> {
        let logits = self.logits(g, query, keys)?;
        g.softmax(logits)
    }
}

/// `Σ_t α_t rows_t` for `alpha: [T]`, `rows: [T, d]`, giving `[d]`.
pub fn weighted_sum(g: &mut Graph, alpha: Var, rows: Var) -> Result<Var> {
    let t = g.shape(alpha)[0];
    let (rt, d) = g.value(rows).dims2();
    if t != rt {
        return Err(Error::dim("weighted_sum", &[t], g.shape(rows)));
    }
    let a = g.reshape(alpha, &[1, t])?;
    let out = g.matmul(a, rows)?;
    g.reshape(out, &[d])
}

/// Multi-head scaled dot-product self-attention without positional encoding,
/// residual path or normalization.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct MhsaVars {
    query: DenseVars,
    key: DenseVars,
    value: DenseVars,
    output: DenseVars,
    heads: usize,
    dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Dense::new(store, &format!("{name}.w_query"), dim, dim, false, rng)?,
            key: Dense::new(store, &format!("{name}.w_key"), dim, dim, false, rng)?,
            value: Dense::new(store, &format!("{name}.w_value"), dim, dim, false, rng)?,
            output: Dense::new(store, &format!("{name}.w_out"), dim, dim, false, rng)?,
            heads,
            dim,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<MhsaVars> {
        Ok(MhsaVars {
            query: self.query.bind(g, store)?,
            key: self.key.bind(g, store)?,
            value: self.value.bind(g, store)?,
            output: self.output.bind(g, store)?,
            heads: self.heads,
            dim: self.dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .flat_map(|d| d.param_ids())
            .collect()
    }
}

impl MhsaVars {
    /// `x: [T, d] → [T, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (t, d) = g.value(x).dims2();
        if d != self.dim || t == 0 {
            return Err(Error::dim("mhsa", g.shape(x), &[self.dim]));
        }
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, lo, hi)?, g.slice_cols(k, lo, hi)?, g.slice_cols(v, lo, hi)?)
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let att = g.softmax(scores)?;
            outs.push(g.matmul(att, vh)?);
        }
        let cat = g.concat(&outs)?;
        self.output.forward(g, cat)
    }
}

/// Stack of dense layers with ReLU between them. `final_relu` controls the
/// activation after the last layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub final_relu: bool,
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    layers: Vec<DenseVars>,
    final_relu: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        dims: &[usize],
        final_relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dims.len());
        let mut prev = in_dim;
        for (i, &d) in dims.iter().enumerate() {
            layers.push(Dense::new(store, &format!("{name}.{i}"), prev, d, true, rng)?);
            prev = d;
        }
        Ok(Self { layers, final_relu })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<MlpVars> {
        Ok(MlpVars {
            layers: self.layers.iter().map(|l| l.bind(g, store)).collect::<Result<_>>()?,
            final_relu: self.final_relu,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Dense::param_ids).collect()
    }
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < n || self.final_relu {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}
