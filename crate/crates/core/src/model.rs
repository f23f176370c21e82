//! The full click-through predictor and its ablation variants.
//!
//! Every impression is turned into one feature row
//! `[E_i; E_uP; E_s; E_c; A_uis; R_uis]` (variants drop or replace the last two
//! blocks), rows are stacked into a batch, and a ReLU MLP with dropout ends in
//! a sigmoid logit trained with binary cross-entropy.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, Graph, ParamStore, Var};
use crate::embeddings::{Embeddings, FieldGroup, Features, Schema};
use crate::error::{Error, Result};
use crate::layers::{weighted_sum, AdditiveAttention, Dense, DenseVars};
use crate::tensor::Tensor;
use crate::uipn::{ProjectionMode, Uipn, UipnConfig, UipnVars};
use crate::urmn::{Memory, MemoryVars, Mode, PendingWrite, ProfileKey, ProfileKeyVars};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    WoUrmn,
    WoUipnTAttention,
    WoUipnTsAttention,
    SharedBottom,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::WoUrmn,
        Variant::WoUipnTAttention,
        Variant::WoUipnTsAttention,
        Variant::SharedBottom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WoUrmn => "wo_urmn",
            Variant::WoUipnTAttention => "wo_uipn_t_attention",
            Variant::WoUipnTsAttention => "wo_uipn_ts_attention",
            Variant::SharedBottom => "shared_bottom",
        }
    }

    /// Whether the variant reads from (and trains) the slot memory.
    pub fn uses_memory(self) -> bool {
        matches!(self, Variant::Full | Variant::WoUipnTAttention | Variant::WoUipnTsAttention)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Hidden widths of the prediction MLP; a final width-1 logit layer is appended.
    pub mlp_dims: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub memory_slots: usize,
    pub alpha_key: f64,
    pub alpha_value: f64,
    /// When false, training never writes to memory regardless of the rates.
    pub memory_writes: bool,
    pub embedding_dim: usize,
    pub projection_dim: usize,
    pub key_dim: usize,
    pub attention_hidden: usize,
    pub max_behaviors: usize,
    pub heads: usize,
    pub projection_mode: ProjectionMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Full,
            mlp_dims: vec![512, 256, 128, 32],
            dropout: 0.5,
            learning_rate: 0.001,
            batch_size: 1024,
            memory_slots: 1000,
            alpha_key: 0.3,
            alpha_value: 0.3,
            memory_writes: true,
            embedding_dim: 16,
            projection_dim: 16,
            key_dim: 16,
            attention_hidden: 16,
            max_behaviors: 50,
            heads: 2,
            projection_mode: ProjectionMode::Onto,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smaller MLP and memory suited to the desk-scale synthetic data.
    pub fn desk() -> Self {
        Self {
            mlp_dims: vec![64, 32, 16, 8],
            memory_slots: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.mlp_dims.is_empty() || self.mlp_dims.contains(&0) {
            return bad(format!("mlp_dims must be nonempty and positive, got {:?}", self.mlp_dims));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        for (name, a) in [("alpha_key", self.alpha_key), ("alpha_value", self.alpha_value)] {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("{name} must lie in [0, 1], got {a}"));
            }
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("memory_slots", self.memory_slots),
            ("embedding_dim", self.embedding_dim),
            ("projection_dim", self.projection_dim),
            ("key_dim", self.key_dim),
            ("attention_hidden", self.attention_hidden),
            ("max_behaviors", self.max_behaviors),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.projection_dim % self.heads != 0 {
            return bad(format!(
                "projection_dim {} is not divisible by heads {}",
                self.projection_dim, self.heads
            ));
        }
        Ok(())
    }
}

/// How the behavior sequence is summarized into the interest block.
#[derive(Clone, Debug)]
enum Interest {
    Projection(Uipn),
    Target(AdditiveAttention),
    TargetScenario {
        item: AdditiveAttention,
        scenario: AdditiveAttention,
    },
    MeanPool,
}

enum InterestVars {
    Projection(UipnVars),
    Target(crate::layers::AttentionVars),
    TargetScenario {
        item: crate::layers::AttentionVars,
        scenario: crate::layers::AttentionVars,
    },
    MeanPool,
}

/// Architecture without state: module layout and parameter handles.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    embeddings: Embeddings,
    interest: Interest,
    interest_dim: usize,
    profile_key: Option<ProfileKey>,
    head: Vec<Dense>,
    input_dim: usize,
}

/// Graph handles for one forward pass.
pub struct BatchOutput {
    /// Click probabilities `[B]`.
    pub probs: Var,
    /// Interest vectors fed to the memory, one per sample with memory reads.
    pub writes: Vec<(Var, Var, Var)>,
}

struct NetworkVars {
    interest: InterestVars,
    profile_key: Option<ProfileKeyVars>,
    memory: Option<MemoryVars>,
    head: Vec<DenseVars>,
}

impl Network {
    fn new(config: ModelConfig, schema: Schema, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let embeddings = Embeddings::new(schema, store, rng)?;
        let d_item = embeddings.group_dim(FieldGroup::Item);
        let d_beh = embeddings.group_dim(FieldGroup::Behavior);
        let d_scen = embeddings.group_dim(FieldGroup::Scenario);
        let d_prof = embeddings.group_dim(FieldGroup::Profile);
        let d_ctx = embeddings.group_dim(FieldGroup::Context);
        if d_beh == 0 {
            return Err(Error::Config("schema has no behavior fields".into()));
        }
        let hidden = config.attention_hidden;
        let (interest, interest_dim) = match config.variant {
            Variant::Full | Variant::WoUrmn => {
                let uipn = Uipn::new(
                    store,
                    UipnConfig {
                        behavior_dim: d_beh,
                        scenario_dim: d_scen,
                        item_dim: d_item,
                        proj_dim: config.projection_dim,
                        heads: config.heads,
                        attention_hidden: hidden,
                        mode: config.projection_mode,
                    },
                    rng,
                )?;
                (Interest::Projection(uipn), config.projection_dim)
            }
            Variant::WoUipnTAttention => (
                Interest::Target(AdditiveAttention::new(store, "t_att", d_item, d_beh, hidden, rng)?),
                d_beh,
            ),
            Variant::WoUipnTsAttention => (
                Interest::TargetScenario {
                    item: AdditiveAttention::new(store, "ts_att.item", d_item, d_beh, hidden, rng)?,
                    scenario: AdditiveAttention::new(store, "ts_att.scenario", d_scen, d_beh, hidden, rng)?,
                },
                d_beh,
            ),
            Variant::SharedBottom => (Interest::MeanPool, d_beh),
        };
        let profile_key = if config.variant.uses_memory() {
            let field_dims: Vec<usize> = embeddings.schema().group(FieldGroup::Profile).map(|f| f.dim).collect();
            if field_dims.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Config("profile fields must share one embedding dim".into()));
            }
            Some(ProfileKey::new(store, field_dims[0], d_item, d_scen, hidden, config.key_dim, rng)?)
        } else {
            None
        };
        let memory_dim = if profile_key.is_some() { interest_dim } else { 0 };
        let input_dim = d_item + d_prof + d_scen + d_ctx + memory_dim + interest_dim;
        let mut head = Vec::with_capacity(config.mlp_dims.len() + 1);
        let mut prev = input_dim;
        for (i, &d) in config.mlp_dims.iter().chain(std::iter::once(&1)).enumerate() {
            head.push(Dense::new(store, &format!("mlp.{i}"), prev, d, true, rng)?);
            prev = d;
        }
        Ok(Self {
            config,
            embeddings,
            interest,
            interest_dim,
            profile_key,
            head,
            input_dim,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &Embeddings {
        &self.embeddings
    }

    /// Width of `R_uis` (and of `A_uis` when the variant has memory).
    pub fn interest_dim(&self) -> usize {
        self.interest_dim
    }

    /// Width of the feature row entering the MLP.
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn head(&self) -> &[Dense] {
        &self.head
    }

    pub fn profile_key(&self) -> Option<&ProfileKey> {
        self.profile_key.as_ref()
    }

    pub fn uipn(&self) -> Option<&Uipn> {
        match &self.interest {
            Interest::Projection(u) => Some(u),
            _ => None,
        }
    }

    fn bind(&self, g: &mut Graph, store: &ParamStore, memory: Option<&Memory>) -> Result<NetworkVars> {
        let interest = match &self.interest {
            Interest::Projection(u) => InterestVars::Projection(u.bind(g, store)?),
            Interest::Target(a) => InterestVars::Target(a.bind(g, store)?),
            Interest::TargetScenario { item, scenario } => InterestVars::TargetScenario {
                item: item.bind(g, store)?,
                scenario: scenario.bind(g, store)?,
            },
            Interest::MeanPool => InterestVars::MeanPool,
        };
        let profile_key = self.profile_key.as_ref().map(|p| p.bind(g, store)).transpose()?;
        let memory = match (&self.profile_key, memory) {
            (Some(_), Some(m)) => Some(m.bind(g)?),
            (Some(_), None) => return Err(Error::Contract("variant reads memory but none is attached".into())),
            (None, _) => None,
        };
        Ok(NetworkVars {
            interest,
            profile_key,
            memory,
            head: self.head.iter().map(|d| d.bind(g, store)).collect::<Result<_>>()?,
        })
    }

    fn interest(&self, g: &mut Graph, vars: &InterestVars, behaviors: Var, scenario: Var, item: Var, mode: Mode) -> Result<Var> {
        let t = g.shape(behaviors)[0];
        if t == 0 {
            return g.input(Tensor::zeros(&[self.interest_dim]));
        }
        match vars {
            InterestVars::Projection(u) => u.forward(g, behaviors, scenario, item, mode == Mode::Eval),
            InterestVars::Target(att) => {
                let w = att.weights(g, item, behaviors)?;
                weighted_sum(g, w, behaviors)
            }
            InterestVars::TargetScenario { item: ai, scenario: as_ } => {
                // softmax(a + b) equals softmax(a) ⊙ softmax(b) renormalized.
                let li = ai.logits(g, item, behaviors)?;
                let ls = as_.logits(g, scenario, behaviors)?;
                let l = g.add(li, ls)?;
                let w = g.softmax(l)?;
                weighted_sum(g, w, behaviors)
            }
            InterestVars::MeanPool => g.mean_rows(behaviors),
        }
    }

    /// Builds the batch on `g`. In training mode dropout is active and, for
    /// memory variants, each sample's `(w, SK, R)` handles are returned for the
    /// deferred write. `zero_augmented` replaces `A_uis` by zeros.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Option<&Memory>,
        batch: &[Features],
        mode: Mode,
        zero_augmented: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchOutput> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let vars = self.bind(g, store, memory)?;
        let emb = &self.embeddings;
        let has_context = emb.schema().group_len(FieldGroup::Context) > 0;
        let mut rows = Vec::with_capacity(batch.len());
        let mut writes = Vec::new();
        for features in batch {
            let item = emb.embed_group(g, store, FieldGroup::Item, &features.item)?;
            let profile = emb.embed_group(g, store, FieldGroup::Profile, &features.profile)?;
            let scenario = emb.embed_group(g, store, FieldGroup::Scenario, &features.scenario)?;
            let behaviors = if features.behavior_len() > self.config.max_behaviors {
                let mut f = features.clone();
                f.truncate_behaviors(self.config.max_behaviors);
                emb.embed_group(g, store, FieldGroup::Behavior, &f.behavior)?
            } else {
                emb.embed_group(g, store, FieldGroup::Behavior, &features.behavior)?
            };
            let mut parts = vec![item, profile, scenario];
            if has_context {
                parts.push(emb.embed_group(g, store, FieldGroup::Context, &features.context)?);
            }
            let r = self.interest(g, &vars.interest, behaviors, scenario, item, mode)?;
            if let (Some(pk), Some(mem)) = (&vars.profile_key, &vars.memory) {
                let rows_p = emb.profile_rows(g, store, &features.profile)?;
                let sk = pk.forward(g, rows_p, item, scenario)?;
                let (w, a) = mem.read(g, sk)?;
                if mode == Mode::Train {
                    writes.push((w, sk, r));
                }
                if zero_augmented {
                    parts.push(g.input(Tensor::zeros(&[self.interest_dim]))?);
                } else {
                    parts.push(a);
                }
            }
            parts.push(r);
            rows.push(g.concat(&parts)?);
        }
        let mut h = g.concat_rows(&rows)?;
        let n = vars.head.len();
        for (i, layer) in vars.head.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < n {
                h = g.relu(h)?;
                h = g.dropout(h, self.config.dropout, mode == Mode::Train, rng)?;
            }
        }
        let p = g.sigmoid(h)?;
        let probs = g.reshape(p, &[batch.len()])?;
        Ok(BatchOutput { probs, writes })
    }
}

/// Trainable model: architecture, parameters, slot memory and optimizer.
#[derive(Clone, Debug)]
pub struct Csmn {
    net: Network,
    params: ParamStore,
    memory: Option<Memory>,
    optimizer: Adam,
    dropout_rng: ChaCha8Rng,
    /// Diagnostic switch replacing `A_uis` with zeros in every forward pass.
    pub zero_augmented: bool,
}

impl Csmn {
    pub fn new(config: ModelConfig, schema: Schema) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let net = Network::new(config, schema, &mut params, &mut rng)?;
        let c = &net.config;
        let memory = if c.variant.uses_memory() {
            Some(Memory::new(
                c.memory_slots,
                c.key_dim,
                net.interest_dim,
                c.alpha_key,
                c.alpha_value,
                &mut rng,
            )?)
        } else {
            None
        };
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(c.seed);
        dropout_rng.set_stream(1);
        let optimizer = Adam::new(c.learning_rate);
        Ok(Self {
            net,
            params,
            memory,
            optimizer,
            dropout_rng,
            zero_augmented: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn memory(&self) -> Option<&Memory> {
        self.memory.as_ref()
    }

    pub fn memory_mut(&mut self) -> Option<&mut Memory> {
        self.memory.as_mut()
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Builds the forward graph without touching model state.
    pub fn forward(&self, g: &mut Graph, batch: &[Features], mode: Mode) -> Result<BatchOutput> {
        let mut rng = self.dropout_rng.clone();
        self.net.forward(g, &self.params, self.memory.as_ref(), batch, mode, self.zero_augmented, &mut rng)
    }

    /// Click probabilities in evaluation mode, computed in chunks of `batch_size`.
    pub fn predict(&self, samples: &[Features]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(self.net.config.batch_size) {
            let mut g = Graph::new();
            let o = self.forward(&mut g, chunk, Mode::Eval)?;
            out.extend_from_slice(g.value(o.probs).data());
        }
        Ok(out)
    }

    /// Mean cross-entropy in evaluation mode.
    pub fn loss(&self, batch: &[Features], labels: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let o = self.forward(&mut g, batch, Mode::Eval)?;
        let l = g.bce(o.probs, labels)?;
        Ok(g.value(l).data()[0])
    }

    /// One optimization step: forward with dropout, loss, backward, the
    /// batch's memory writes in sample order, then the Adam update. Returns
    /// the batch loss.
    pub fn train_step(&mut self, batch: &[Features], labels: &[f64]) -> Result<f64> {
        let step = self.optimizer.steps() + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite(op) => Error::Diverged(format!("non-finite value in {op} at step {step}")),
            other => other,
        };
        let mut g = Graph::new();
        let out = self
            .net
            .forward(&mut g, &self.params, self.memory.as_ref(), batch, Mode::Train, self.zero_augmented, &mut self.dropout_rng)
            .map_err(diverged)?;
        let loss = g.bce(out.probs, labels).map_err(diverged)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Diverged(format!("loss {value} at step {step}")));
        }
        g.backward(loss, &mut self.params).map_err(diverged)?;
        if self.net.config.memory_writes {
            if let Some(mem) = self.memory.as_mut() {
                for &(w, sk, r) in &out.writes {
                    mem.write(Mode::Train, g.value(w).data(), g.value(sk).data(), g.value(r).data())?;
                }
            }
        }
        self.optimizer.step(&mut self.params)?;
        Ok(value)
    }

    /// Values of the deferred writes a training pass over `batch` would apply.
    pub fn pending_writes(&self, batch: &[Features]) -> Result<Vec<PendingWrite>> {
        let mut g = Graph::new();
        let mut rng = self.dropout_rng.clone();
        let out = self
            .net
            .forward(&mut g, &self.params, self.memory.as_ref(), batch, Mode::Train, self.zero_augmented, &mut rng)?;
        Ok(out
            .writes
            .iter()
            .map(|&(w, sk, r)| PendingWrite {
                weights: g.value(w).data().to_vec(),
                key: g.value(sk).data().to_vec(),
                interest: g.value(r).data().to_vec(),
            })
            .collect())
    }

    /// Reassembles a model from saved parts. The optimizer starts fresh.
    pub fn from_parts(config: ModelConfig, schema: Schema, params: ParamStore, memory: Option<Memory>) -> Result<Self> {
        let mut model = Self::new(config, schema)?;
        if params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (_, name, tensor) in params.iter() {
            let target = model
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if model.params.get(target).shape() != tensor.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{name}`")));
            }
            model.params.get_mut(target).data_mut().copy_from_slice(tensor.data());
        }
        match (&model.memory, memory) {
            (Some(m), Some(saved)) => {
                if m.keys().shape() != saved.keys().shape() || m.values().shape() != saved.values().shape() {
                    return Err(Error::Checkpoint("memory shape mismatch".into()));
                }
                model.memory = Some(saved);
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("memory section does not match variant".into())),
        }
        Ok(model)
    }
}
