use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GenConfig, Record};
use crate::embeddings::{FieldGroup, FieldSpec, Features, Schema};
use crate::error::{Error, Result};

/// Feature schema of generated data: item id and category (mirrored as
/// behavior fields), one profile field per latent coordinate, scenario and
/// context. Fields named in `hashed_fields` use `hash_buckets` buckets.
pub fn schema_for(cfg: &GenConfig, embedding_dim: usize) -> Result<Schema> {
    let field = |name: &str, group: FieldGroup, vocab: usize| {
        let hashed = cfg.hashed_fields.iter().any(|h| h == name);
        let vocab = if hashed { cfg.hash_buckets } else { vocab };
        FieldSpec::new(name, group, vocab, embedding_dim).hashed(hashed)
    };
    let known = ["item_id", "item_cat", "scenario", "context"];
    if let Some(bad) = cfg
        .hashed_fields
        .iter()
        .find(|h| !known.contains(&h.as_str()) && !h.starts_with("profile_"))
    {
        return Err(Error::UnknownField(bad.clone()));
    }
    let mut fields = vec![
        field("item_id", FieldGroup::Item, cfg.items),
        field("item_cat", FieldGroup::Item, cfg.latent_dim),
        field("item_id", FieldGroup::Behavior, cfg.items),
        field("item_cat", FieldGroup::Behavior, cfg.latent_dim),
    ];
    for k in 0..cfg.latent_dim {
        fields.push(field(&format!("profile_{k}"), FieldGroup::Profile, cfg.profile_buckets));
    }
    fields.push(field("scenario", FieldGroup::Scenario, cfg.scenarios));
    fields.push(field("context", FieldGroup::Context, cfg.contexts));
    Schema::new(fields)
}

/// Turns records into per-group id lists following a schema.
#[derive(Clone, Debug)]
pub struct Encoder {
    schema: Schema,
}

impl Encoder {
    pub fn new(schema: Schema) -> Self {
        Self { schema }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    fn scalar(r: &Record, name: &str) -> Option<u64> {
        match name {
            "item_id" => Some(r.item_id),
            "item_cat" => Some(r.item_cat),
            "scenario" => Some(r.scenario),
            "context" => Some(r.context),
            _ => name.strip_prefix("profile_")?.parse::<usize>().ok().and_then(|k| r.profile.get(k).copied()),
        }
    }

    pub fn encode(&self, r: &Record) -> Result<Features> {
        let wrap = |spec: &FieldSpec, e: Error| Error::InvalidArgument(format!("field {}.{}: {e}", spec.group, spec.name));
        let mut f = Features::default();
        for group in FieldGroup::ALL {
            let lists = self
                .schema
                .group(group)
                .map(|spec| {
                    let raw: Vec<u64> = if group == FieldGroup::Behavior {
                        match spec.name.as_str() {
                            "item_id" => r.hist_items.clone(),
                            "item_cat" => r.hist_cats.clone(),
                            other => return Err(Error::UnknownField(format!("behavior.{other}"))),
                        }
                    } else {
                        vec![Self::scalar(r, &spec.name).ok_or_else(|| Error::UnknownField(format!("{group}.{}", spec.name)))?]
                    };
                    raw.into_iter().map(|t| spec.encode_int(t).map_err(|e| wrap(spec, e))).collect()
                })
                .collect::<Result<Vec<Vec<usize>>>>()?;
            match group {
                FieldGroup::Item => f.item = lists,
                FieldGroup::Behavior => f.behavior = lists,
                FieldGroup::Profile => f.profile = lists,
                FieldGroup::Scenario => f.scenario = lists,
                FieldGroup::Context => f.context = lists,
            }
        }
        Ok(f)
    }

    /// Encodes every record; the error names the 1-based record position.
    pub fn encode_all(&self, records: &[Record]) -> Result<Vec<Features>> {
        records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                self.encode(r).map_err(|e| Error::Parse {
                    line: i as u64 + 2,
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

/// Index batches over `n` records: shuffled by `shuffle_seed` when given,
/// the last batch possibly short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> GenConfig {
        GenConfig {
            items: 50,
            latent_dim: 4,
            scenarios: 3,
            contexts: 2,
            ..GenConfig::default()
        }
    }

    fn record() -> Record {
        Record {
            user_id: 9,
            day: 2,
            scenario: 2,
            context: 1,
            item_id: 49,
            item_cat: 3,
            profile: vec![0, 7, 3, 1],
            hist_items: vec![4, 5],
            hist_cats: vec![1, 2],
            hist_days: vec![-3, -1],
            label: 1,
        }
    }

    #[test]
    fn encodes_every_group() {
        let schema = schema_for(&cfg(), 4).unwrap();
        let enc = Encoder::new(schema.clone());
        let f = enc.encode(&record()).unwrap();
        let item_spec = schema.field(FieldGroup::Item, "item_id").unwrap();
        assert!(item_spec.hashed);
        assert_eq!(f.item, vec![vec![item_spec.encode_int(49).unwrap()], vec![3]]);
        assert_eq!(f.behavior[1], vec![1, 2]);
        assert_eq!(f.behavior[0].len(), 2);
        assert_eq!(f.profile, vec![vec![0], vec![7], vec![3], vec![1]]);
        assert_eq!(f.scenario, vec![vec![2]]);
        assert_eq!(f.context, vec![vec![1]]);
    }

    #[test]
    fn out_of_range_ids_fail_unless_hashed() {
        let mut r = record();
        r.scenario = 9;
        let direct = Encoder::new(schema_for(&cfg(), 4).unwrap());
        assert!(direct.encode(&r).is_err());
        let err = direct.encode_all(&[record(), r.clone()]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
        let hashed_cfg = GenConfig {
            hashed_fields: vec!["item_id".into(), "scenario".into()],
            ..cfg()
        };
        let hashed = Encoder::new(schema_for(&hashed_cfg, 4).unwrap());
        assert!(hashed.encode(&r).is_ok());
        let bad = GenConfig {
            hashed_fields: vec!["price".into()],
            ..cfg()
        };
        assert!(schema_for(&bad, 4).is_err());
    }

    #[test]
    fn batches() {
        let b = batch_indices(10, 4, None);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(batch_indices(10, 4, Some(3)), batch_indices(10, 4, Some(3)));
        assert_ne!(batch_indices(10, 10, Some(3)), batch_indices(10, 10, Some(4)));
        let mut all: Vec<usize> = batch_indices(10, 3, Some(1)).concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
