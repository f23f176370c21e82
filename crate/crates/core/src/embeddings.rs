//! Shared-bottom embedding tables for the five feature groups.
//!
//! Every field owns exactly one table and every scenario and model variant
//! reads from the same tables. Behavior fields do not own tables: a behavior
//! is a past item, so each behavior field resolves to the item field with the
//! same name.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Version of [`hash_id`]. Bump whenever the mapping changes; datasets encoded
/// under one version are not portable to another.
pub const HASH_VERSION: u32 = 1;

/// Maps a raw id token to a bucket in `0..vocab`.
///
/// Version 1: 64-bit FNV-1a over the UTF-8 bytes of the token, passed through
/// the splitmix64 finalizer, reduced modulo `vocab`. Integers are hashed via
/// their decimal form so `7` and `"7"` agree.
pub fn hash_id(raw: &str, vocab: usize) -> usize {
    assert!(vocab >= 1, "vocab must be positive");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in raw.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h % vocab as u64) as usize
}

pub fn hash_int(raw: u64, vocab: usize) -> usize {
    hash_id(&raw.to_string(), vocab)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldGroup {
    Item,
    Behavior,
    Profile,
    Scenario,
    Context,
}

impl FieldGroup {
    pub const ALL: [FieldGroup; 5] = [
        FieldGroup::Item,
        FieldGroup::Behavior,
        FieldGroup::Profile,
        FieldGroup::Scenario,
        FieldGroup::Context,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for FieldGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FieldGroup::Item => "item",
            FieldGroup::Behavior => "behavior",
            FieldGroup::Profile => "profile",
            FieldGroup::Scenario => "scenario",
            FieldGroup::Context => "context",
        };
        f.write_str(s)
    }
}

impl FromStr for FieldGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FieldGroup::ALL
            .into_iter()
            .find(|g| g.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown field group `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub group: FieldGroup,
    pub vocab: usize,
    pub dim: usize,
    /// Raw tokens are bucketed with [`hash_id`] instead of parsed as indices.
    pub hashed: bool,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, group: FieldGroup, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            group,
            vocab,
            dim,
            hashed: false,
        }
    }

    pub fn hashed(mut self, flag: bool) -> Self {
        self.hashed = flag;
        self
    }

    /// Integer-token form of [`FieldSpec::encode`].
    pub fn encode_int(&self, token: u64) -> Result<usize> {
        if self.hashed {
            return Ok(hash_int(token, self.vocab));
        }
        match usize::try_from(token) {
            Ok(id) if id < self.vocab => Ok(id),
            _ => Err(Error::IndexOutOfRange {
                index: usize::try_from(token).unwrap_or(usize::MAX),
                bound: self.vocab,
            }),
        }
    }

    /// Converts a raw token from a data file into a table index.
    pub fn encode(&self, token: &str) -> Result<usize> {
        if self.hashed {
            return Ok(hash_id(token, self.vocab));
        }
        let id: usize = token
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("field `{}`: `{token}` is not an index", self.name)))?;
        if id >= self.vocab {
            return Err(Error::IndexOutOfRange {
                index: id,
                bound: self.vocab,
            });
        }
        Ok(id)
    }
}

/// The declared feature fields of a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<FieldSpec>,
}

impl Schema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        for f in &fields {
            if f.vocab == 0 || f.dim == 0 {
                return Err(Error::Config(format!("field `{}` needs vocab >= 1 and dim >= 1", f.name)));
            }
        }
        for f in fields.iter().filter(|f| f.group == FieldGroup::Behavior) {
            let item = fields
                .iter()
                .find(|i| i.group == FieldGroup::Item && i.name == f.name)
                .ok_or_else(|| Error::Config(format!("behavior field `{}` has no item field of the same name", f.name)))?;
            if item.vocab != f.vocab || item.dim != f.dim || item.hashed != f.hashed {
                return Err(Error::Config(format!("behavior field `{}` disagrees with its item field", f.name)));
            }
        }
        for g in [FieldGroup::Item, FieldGroup::Scenario, FieldGroup::Profile] {
            if !fields.iter().any(|f| f.group == g) {
                return Err(Error::Config(format!("schema declares no {g} field")));
            }
        }
        let mut names: Vec<(&str, FieldGroup)> = fields.iter().map(|f| (f.name.as_str(), f.group)).collect();
        names.sort();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate field name within a group".into()));
        }
        Ok(Self { fields })
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn group(&self, group: FieldGroup) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(move |f| f.group == group)
    }

    pub fn group_len(&self, group: FieldGroup) -> usize {
        self.group(group).count()
    }

    pub fn field(&self, group: FieldGroup, name: &str) -> Result<&FieldSpec> {
        self.group(group)
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownField(format!("{group}.{name}")))
    }

    /// Width of the concatenated embedding of a group.
    pub fn group_dim(&self, group: FieldGroup) -> usize {
        self.group(group).map(|f| f.dim).sum()
    }
}

/// Encoded feature ids of one impression, per group in schema field order.
/// Each entry is the id list of one field: a single id for single-valued
/// fields, several for multi-valued profile fields, and one id per behavior
/// for behavior fields.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Features {
    pub item: Vec<Vec<usize>>,
    pub behavior: Vec<Vec<usize>>,
    pub profile: Vec<Vec<usize>>,
    pub scenario: Vec<Vec<usize>>,
    pub context: Vec<Vec<usize>>,
}

impl Features {
    pub fn group(&self, group: FieldGroup) -> &[Vec<usize>] {
        match group {
            FieldGroup::Item => &self.item,
            FieldGroup::Behavior => &self.behavior,
            FieldGroup::Profile => &self.profile,
            FieldGroup::Scenario => &self.scenario,
            FieldGroup::Context => &self.context,
        }
    }

    /// Number of behaviors.
    pub fn behavior_len(&self) -> usize {
        self.behavior.first().map_or(0, Vec::len)
    }

    /// Keeps only the most recent `max_len` behaviors (ids are stored oldest
    /// first).
    pub fn truncate_behaviors(&mut self, max_len: usize) {
        for list in &mut self.behavior {
            if list.len() > max_len {
                list.drain(..list.len() - max_len);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub spec: FieldSpec,
    pub weights: ParamId,
}

/// One trainable table per field, registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Embeddings {
    schema: Schema,
    tables: Vec<EmbeddingTable>,
    /// For every group, the table index of each of its fields.
    groups: [Vec<usize>; 5],
}

impl Embeddings {
    /// Registers every table as `emb.<group>.<name>`, initialized uniformly in
    /// `[-1/sqrt(d), 1/sqrt(d)]`.
    pub fn new<R: Rng + ?Sized>(schema: Schema, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let mut tables: Vec<EmbeddingTable> = Vec::new();
        let mut groups: [Vec<usize>; 5] = Default::default();
        for g in FieldGroup::ALL {
            if g == FieldGroup::Behavior {
                continue;
            }
            for spec in schema.group(g) {
                let bound = 1.0 / (spec.dim as f64).sqrt();
                let data = (0..spec.vocab * spec.dim)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                let weights = store.add(format!("emb.{g}.{}", spec.name), Tensor::matrix(spec.vocab, spec.dim, data)?)?;
                groups[g.slot()].push(tables.len());
                tables.push(EmbeddingTable {
                    spec: spec.clone(),
                    weights,
                });
            }
        }
        for spec in schema.group(FieldGroup::Behavior) {
            let idx = tables
                .iter()
                .position(|t| t.spec.group == FieldGroup::Item && t.spec.name == spec.name)
                .ok_or_else(|| Error::UnknownField(spec.name.clone()))?;
            groups[FieldGroup::Behavior.slot()].push(idx);
        }
        Ok(Self { schema, tables, groups })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn tables(&self) -> &[EmbeddingTable] {
        &self.tables
    }

    /// Table backing a field of a group. Behavior fields resolve to the item
    /// table of the same name.
    pub fn table(&self, group: FieldGroup, name: &str) -> Result<&EmbeddingTable> {
        self.groups[group.slot()]
            .iter()
            .map(|&i| &self.tables[i])
            .find(|t| t.spec.name == name)
            .ok_or_else(|| Error::UnknownField(format!("{group}.{name}")))
    }

    pub fn group_dim(&self, group: FieldGroup) -> usize {
        self.groups[group.slot()].iter().map(|&i| self.tables[i].spec.dim).sum()
    }

    fn check_arity(&self, group: FieldGroup, ids: &[Vec<usize>]) -> Result<()> {
        let expected = self.groups[group.slot()].len();
        if ids.len() != expected {
            return Err(Error::UnknownField(format!(
                "{group}: expected {expected} field id lists, got {}",
                ids.len()
            )));
        }
        Ok(())
    }

    /// Per-field lookups of one group, concatenated along the last axis.
    ///
    /// For the behavior group the result is `[T, d_b]`, one row per behavior
    /// (possibly `T = 0`). For every other group it is a single vector; a
    /// field with several ids is mean-pooled and one with none is zero.
    pub fn embed_group(&self, g: &mut Graph, store: &ParamStore, group: FieldGroup, ids: &[Vec<usize>]) -> Result<Var> {
        self.check_arity(group, ids)?;
        if group == FieldGroup::Behavior {
            let t = ids.first().map_or(0, Vec::len);
            if ids.iter().any(|l| l.len() != t) {
                return Err(Error::InvalidArgument("behavior fields have unequal lengths".into()));
            }
            let parts = self.groups[group.slot()]
                .iter()
                .zip(ids)
                .map(|(&ti, list)| g.gather(store, self.tables[ti].weights, list))
                .collect::<Result<Vec<_>>>()?;
            return g.concat(&parts);
        }
        let parts = self.field_vectors(g, store, group, ids)?;
        g.concat(&parts)
    }

    /// One vector per field of a non-behavior group, without concatenation.
    pub fn field_vectors(&self, g: &mut Graph, store: &ParamStore, group: FieldGroup, ids: &[Vec<usize>]) -> Result<Vec<Var>> {
        self.check_arity(group, ids)?;
        self.groups[group.slot()]
            .iter()
            .zip(ids)
            .map(|(&ti, list)| {
                let table = &self.tables[ti];
                match list.len() {
                    0 => g.input(Tensor::zeros(&[table.spec.dim])),
                    1 => {
                        let row = g.gather(store, table.weights, list)?;
                        g.reshape(row, &[table.spec.dim])
                    }
                    _ => {
                        let rows = g.gather(store, table.weights, list)?;
                        g.mean_rows(rows)
                    }
                }
            })
            .collect()
    }

    /// Profile fields as rows `[P, d]`; every profile field must share `d`.
    pub fn profile_rows(&self, g: &mut Graph, store: &ParamStore, ids: &[Vec<usize>]) -> Result<Var> {
        let parts = self.field_vectors(g, store, FieldGroup::Profile, ids)?;
        g.concat_rows(&parts)
    }
}
