//! User interest projection: behaviors are mapped into a common space with
//! the visiting scenario, reduced to their component along the scenario
//! direction, refined by multi-head self-attention, and pooled against the
//! target item into the scenario-specific interest vector `R_uis`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layers::{weighted_sum, AdditiveAttention, AttentionVars, Dense, DenseVars, MhsaVars, MultiHeadSelfAttention};
use crate::tensor::Tensor;

pub use crate::autodiff::ops::{project, reject, DIRECTION_EPS};

/// Which part of a behavior survives purification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMode {
    /// Component along the scenario direction.
    #[default]
    Onto,
    /// Component orthogonal to the scenario direction.
    Complement,
}

impl fmt::Display for ProjectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProjectionMode::Onto => "onto",
            ProjectionMode::Complement => "complement",
        })
    }
}

impl FromStr for ProjectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onto" => Ok(ProjectionMode::Onto),
            "complement" => Ok(ProjectionMode::Complement),
            other => Err(Error::Config(format!("unknown projection_mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct UipnConfig {
    pub behavior_dim: usize,
    pub scenario_dim: usize,
    pub item_dim: usize,
    pub proj_dim: usize,
    pub heads: usize,
    pub attention_hidden: usize,
    pub mode: ProjectionMode,
}

/// Registered parameters: `W_o`, `W_s`, the self-attention maps and the
/// target-attention parameters `z, W_i, W_f, b`.
#[derive(Clone, Debug)]
pub struct Uipn {
    pub behavior_map: Dense,
    pub scenario_map: Dense,
    pub mhsa: MultiHeadSelfAttention,
    pub attention: AdditiveAttention,
    pub config: UipnConfig,
}

impl Uipn {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: UipnConfig, rng: &mut R) -> Result<Self> {
        let d = config.proj_dim;
        Ok(Self {
            behavior_map: Dense::new(store, "uipn.w_o", config.behavior_dim, d, false, rng)?,
            scenario_map: Dense::new(store, "uipn.w_s", config.scenario_dim, d, false, rng)?,
            mhsa: MultiHeadSelfAttention::new(store, "uipn.mhsa", d, config.heads, rng)?,
            attention: AdditiveAttention::new(store, "uipn.att", config.item_dim, d, config.attention_hidden, rng)?,
            config,
        })
    }

    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> Result<UipnVars> {
        Ok(UipnVars {
            behavior_map: self.behavior_map.bind(g, store)?,
            scenario_map: self.scenario_map.bind(g, store)?,
            mhsa: self.mhsa.bind(g, store)?,
            attention: self.attention.bind(g, store)?,
            mode: self.config.mode,
            proj_dim: self.config.proj_dim,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.behavior_map.param_ids();
        ids.extend(self.scenario_map.param_ids());
        ids.extend(self.mhsa.param_ids());
        ids.extend(self.attention.param_ids());
        ids
    }
}

/// [`Uipn`] parameters bound to one graph.
#[derive(Clone, Copy, Debug)]
pub struct UipnVars {
    behavior_map: DenseVars,
    scenario_map: DenseVars,
    mhsa: MhsaVars,
    attention: AttentionVars,
    mode: ProjectionMode,
    proj_dim: usize,
}

impl UipnVars {
    /// Row `t` becomes `project(W_o e_t, W_s E_s)` (or its orthogonal part).
    ///
    /// A scenario direction with norm `<= 1e-12` is an error unless
    /// `degenerate_passthrough` is set, in which case the mapped behaviors are
    /// returned unprojected.
    pub fn purify(&self, g: &mut Graph, behaviors: Var, scenario: Var, degenerate_passthrough: bool) -> Result<Var> {
        let f = self.behavior_map.forward(g, behaviors)?;
        let fs = self.scenario_map.forward(g, scenario)?;
        g.project_rows(f, fs, self.mode == ProjectionMode::Complement, degenerate_passthrough)
    }

    pub fn mhsa(&self, g: &mut Graph, purified: Var) -> Result<Var> {
        self.mhsa.forward(g, purified)
    }

    /// Softmax-normalized target-attention weights over the refined rows.
    pub fn target_attention(&self, g: &mut Graph, item: Var, refined: Var) -> Result<Var> {
        self.attention.weights(g, item, refined)
    }

    pub fn interest(&self, g: &mut Graph, alpha: Var, refined: Var) -> Result<Var> {
        weighted_sum(g, alpha, refined)
    }

    /// Full pipeline. An empty behavior sequence yields the zero vector.
    pub fn forward(&self, g: &mut Graph, behaviors: Var, scenario: Var, item: Var, degenerate_passthrough: bool) -> Result<Var> {
        if g.shape(behaviors)[0] == 0 {
            return g.input(Tensor::zeros(&[self.proj_dim]));
        }
        let purified = self.purify(g, behaviors, scenario, degenerate_passthrough)?;
        let refined = self.mhsa(g, purified)?;
        let alpha = self.target_attention(g, item, refined)?;
        self.interest(g, alpha, refined)
    }
}
