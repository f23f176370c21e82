//! User representation memory: a profile-derived key addresses a bank of
//! key/value slots by cosine-softmax, the weighted value sum is the augmented
//! interest `A_uis`, and training passes write moving averages of the key and
//! of the behavior interest back into the slots.
//!
//! Slots are plain buffers, never registered parameters, so the optimizer
//! cannot touch them and the write is invisible to the gradient tape.

use rand::Rng;

use crate::autodiff::ops::{cosine, softmax};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{weighted_sum, AdditiveAttention, AttentionVars, Mlp, MlpVars};
use crate::tensor::Tensor;

/// Half-width of the uniform slot initialization.
pub const SLOT_INIT: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Attention-pooled profile plus the 3-layer key network `F`.
#[derive(Clone, Debug)]
pub struct ProfileKey {
    pub attention: AdditiveAttention,
    pub net: Mlp,
    pub key_dim: usize,
}

impl ProfileKey {
    /// `F` maps `[pooled profile; E_i; E_s]` through hidden widths
    /// `2·key_dim, 2·key_dim` (ReLU) to a linear `key_dim` output.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        profile_dim: usize,
        item_dim: usize,
        scenario_dim: usize,
        attention_hidden: usize,
        key_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = AdditiveAttention::new(store, "urmn.profile_att", item_dim, profile_dim, attention_hidden, rng)?;
        let net = Mlp::new(
            store,
            "urmn.key_net",
            profile_dim + item_dim + scenario_dim,
            &[2 * key_dim, 2 * key_dim, key_dim],
            false,
            rng,
        )?;
        Ok(Self { attention, net, key_dim })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<ProfileKeyVars> {
        Ok(ProfileKeyVars {
            attention: self.attention.bind(g, store)?,
            net: self.net.bind(g, store)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attention.param_ids();
        ids.extend(self.net.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct ProfileKeyVars {
    attention: AttentionVars,
    net: MlpVars,
}

impl ProfileKeyVars {
    /// Attention weights `[P]` of the profile rows against the target item.
    pub fn profile_weights(&self, g: &mut Graph, profiles: Var, item: Var) -> Result<Var> {
        if g.shape(profiles)[0] == 0 {
            return Err(Error::InvalidArgument("profile key needs at least one profile row".into()));
        }
        self.attention.weights(g, item, profiles)
    }

    /// `SK = F([Σ_j w_j e_pj; E_i; E_s])` for `profiles: [P, d]`.
    pub fn forward(&self, g: &mut Graph, profiles: Var, item: Var, scenario: Var) -> Result<Var> {
        let w = self.profile_weights(g, profiles, item)?;
        let pooled = weighted_sum(g, w, profiles)?;
        let x = g.concat(&[pooled, item, scenario])?;
        self.net.forward(g, x)
    }
}

/// One sample's deferred write: the read weights together with the detached
/// key and interest vectors it should be blended toward.
#[derive(Clone, Debug, PartialEq)]
pub struct PendingWrite {
    pub weights: Vec<f64>,
    pub key: Vec<f64>,
    pub interest: Vec<f64>,
}

/// `q` key/value slots with their update rates.
#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    keys: Tensor,
    values: Tensor,
    alpha_key: f64,
    alpha_value: f64,
}

impl Memory {
    /// Slots drawn i.i.d. from `U[-0.05, 0.05]`.
    pub fn new<R: Rng + ?Sized>(
        slots: usize,
        key_dim: usize,
        value_dim: usize,
        alpha_key: f64,
        alpha_value: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-SLOT_INIT..=SLOT_INIT)).collect::<Vec<_>>();
        let keys = Tensor::matrix(slots, key_dim, draw(slots * key_dim))?;
        let values = Tensor::matrix(slots, value_dim, draw(slots * value_dim))?;
        Self::from_parts(keys, values, alpha_key, alpha_value)
    }

    pub fn from_parts(keys: Tensor, values: Tensor, alpha_key: f64, alpha_value: f64) -> Result<Self> {
        if keys.shape().len() != 2 || values.shape().len() != 2 || keys.shape()[0] != values.shape()[0] {
            return Err(Error::dim("memory", keys.shape(), values.shape()));
        }
        if keys.shape()[0] == 0 {
            return Err(Error::Config("memory needs at least one slot".into()));
        }
        for (name, a) in [("update rate for keys", alpha_key), ("update rate for values", alpha_value)] {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {a}")));
            }
        }
        if !keys.is_finite() || !values.is_finite() {
            return Err(Error::NonFinite("memory slots"));
        }
        Ok(Self {
            keys,
            values,
            alpha_key,
            alpha_value,
        })
    }

    pub fn slots(&self) -> usize {
        self.keys.shape()[0]
    }

    pub fn key_dim(&self) -> usize {
        self.keys.shape()[1]
    }

    pub fn value_dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn alpha_key(&self) -> f64 {
        self.alpha_key
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha_value
    }

    pub fn set_rates(&mut self, alpha_key: f64, alpha_value: f64) -> Result<()> {
        *self = Self::from_parts(self.keys.clone(), self.values.clone(), alpha_key, alpha_value)?;
        Ok(())
    }

    /// Read without a graph: `(w, A)`.
    pub fn read_plain(&self, key: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if key.len() != self.key_dim() {
            return Err(Error::dim("memory_read", &[key.len()], self.keys.shape()));
        }
        let sims: Vec<f64> = (0..self.slots()).map(|j| cosine(key, self.keys.row(j))).collect();
        let w = softmax(&sims);
        let mut a = vec![0.0; self.value_dim()];
        for (j, wj) in w.iter().enumerate() {
            for (acc, v) in a.iter_mut().zip(self.values.row(j)) {
                *acc += wj * v;
            }
        }
        Ok((w, a))
    }

    /// Places a snapshot of the slots on the graph as constant inputs.
    pub fn bind(&self, g: &mut Graph) -> Result<MemoryVars> {
        Ok(MemoryVars {
            keys: g.input(self.keys.clone())?,
            values: g.input(self.values.clone())?,
        })
    }

    /// Blends every slot toward the sample's key and interest:
    /// `Key_j ← α_k w_j SK + (1 − α_k) Key_j`, `Value_j ← α_v w_j R + (1 − α_v) Value_j`.
    ///
    /// A rate of exactly zero skips the corresponding update, leaving those
    /// slots bit-identical.
    pub fn write(&mut self, mode: Mode, weights: &[f64], key: &[f64], interest: &[f64]) -> Result<()> {
        if mode != Mode::Train {
            return Err(Error::Contract("memory write outside training mode".into()));
        }
        let q = self.slots();
        if weights.len() != q {
            return Err(Error::dim("memory_write", &[weights.len()], &[q]));
        }
        if key.len() != self.key_dim() || interest.len() != self.value_dim() {
            return Err(Error::dim("memory_write", &[key.len(), interest.len()], &[self.key_dim(), self.value_dim()]));
        }
        if !key.iter().chain(interest).chain(weights).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("memory_write"));
        }
        blend(&mut self.keys, self.alpha_key, weights, key);
        blend(&mut self.values, self.alpha_value, weights, interest);
        Ok(())
    }

    pub fn apply(&mut self, mode: Mode, writes: &[PendingWrite]) -> Result<()> {
        for w in writes {
            self.write(mode, &w.weights, &w.key, &w.interest)?;
        }
        Ok(())
    }
}

fn blend(slots: &mut Tensor, alpha: f64, weights: &[f64], target: &[f64]) {
    if alpha == 0.0 {
        return;
    }
    for (j, wj) in weights.iter().enumerate() {
        for (s, t) in slots.row_mut(j).iter_mut().zip(target) {
            *s = alpha * wj * t + (1.0 - alpha) * *s;
        }
    }
}

/// Slot snapshot bound to one graph.
#[derive(Clone, Copy, Debug)]
pub struct MemoryVars {
    keys: Var,
    values: Var,
}

impl MemoryVars {
    /// `(w, A)` with gradient reaching `key` through the cosine scores.
    pub fn read(&self, g: &mut Graph, key: Var) -> Result<(Var, Var)> {
        let sims = g.row_cosine(key, self.keys)?;
        let w = g.softmax(sims)?;
        let a = weighted_sum(g, w, self.values)?;
        Ok((w, a))
    }
}
