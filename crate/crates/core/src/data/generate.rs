use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{GenConfig, Record, TopicMasks};
use crate::autodiff::ops::sigmoid;
use crate::error::{Error, Result};

/// The latent click model behind a generated dataset.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub latent_dim: usize,
    /// Row-major `[users, latent_dim]`.
    pub users: Vec<f64>,
    /// Row-major `[items, latent_dim]`.
    pub items: Vec<f64>,
    pub masks: Vec<Vec<bool>>,
    pub bias: Vec<f64>,
    pub temperature: f64,
}

impl GroundTruth {
    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.latent_dim..(u + 1) * self.latent_dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    /// `τ ⟨z_u ⊙ m_s, z_i ⊙ m_s⟩ + bias_s`.
    pub fn logit(&self, user: usize, item: usize, scenario: usize) -> f64 {
        let (zu, zi) = (self.user(user), self.item(item));
        let mask = &self.masks[scenario];
        let dot: f64 = (0..self.latent_dim).filter(|&k| mask[k]).map(|k| zu[k] * zi[k]).sum();
        self.temperature * dot + self.bias[scenario]
    }

    pub fn probability(&self, user: usize, item: usize, scenario: usize) -> f64 {
        sigmoid(self.logit(user, item, scenario))
    }

    /// True click probability of a record, or `None` if its ids fall outside
    /// the generated population.
    pub fn score(&self, r: &Record) -> Option<f64> {
        let (u, i, s) = (r.user_id as usize, r.item_id as usize, r.scenario as usize);
        let ok = u < self.users.len() / self.latent_dim && i < self.items.len() / self.latent_dim && s < self.masks.len();
        ok.then(|| self.probability(u, i, s))
    }
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub train: Vec<Record>,
    pub test: Vec<Record>,
    pub truth: GroundTruth,
    /// Home scenario of each user.
    pub home: Vec<usize>,
}

fn normal_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
    (0..rows * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn topic_masks(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let d = cfg.latent_dim;
    let half = d / 2;
    (0..cfg.scenarios)
        .map(|s| {
            let mut m = vec![false; d];
            match cfg.topic_masks {
                TopicMasks::Random => sample(rng, d, half).into_iter().for_each(|k| m[k] = true),
                TopicMasks::Contiguous => {
                    let start = s * d / cfg.scenarios;
                    (0..half).for_each(|k| m[(start + k) % d] = true);
                }
            }
            m
        })
        .collect()
}

fn history_len(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Result<usize> {
    let lambda = if cfg.behaviors_dispersion > 0.0 {
        let shape = 1.0 / cfg.behaviors_dispersion;
        let gamma = Gamma::new(shape, cfg.behaviors_mean * cfg.behaviors_dispersion)
            .map_err(|e| Error::Config(format!("history length distribution: {e}")))?;
        gamma.sample(rng)
    } else {
        cfg.behaviors_mean
    };
    let n = if lambda > 0.0 {
        Poisson::new(lambda)
            .map_err(|e| Error::Config(format!("history length distribution: {e}")))?
            .sample(rng) as usize
    } else {
        0
    };
    // A user outside the cold-start set always has some history.
    Ok(n.max(1))
}

/// Generates the full dataset. Latents, masks, pools and histories come from
/// one stream of the seeded generator; each scenario's impressions come from
/// their own stream (index = scenario id), so scenarios are independent of
/// each other's volume.
pub fn generate(cfg: &GenConfig) -> Result<Generated> {
    cfg.validate()?;
    let (n, m, k, d) = (cfg.users, cfg.items, cfg.scenarios, cfg.latent_dim);
    let cold_ratio = cfg.cold_start_ratio.resolve(k, "cold_start_ratio")?;
    let bias = cfg.ctr_bias.resolve(k, "ctr_bias")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);

    let users = normal_rows(&mut rng, n, d);
    let items = normal_rows(&mut rng, m, d);
    let masks = topic_masks(cfg, &mut rng);
    let truth = GroundTruth {
        latent_dim: d,
        users,
        items,
        masks,
        bias,
        temperature: cfg.temperature,
    };

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut home = vec![0; n];
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, &u) in order.iter().enumerate() {
        home[u] = j % k;
        pools[j % k].push(u);
    }
    for pool in &mut pools {
        pool.sort_unstable();
    }
    let mut cold = vec![false; n];
    for (pool, &r) in pools.iter().zip(&cold_ratio) {
        let count = (r * pool.len() as f64).round() as usize;
        for idx in sample(&mut rng, pool.len(), count.min(pool.len())) {
            cold[pool[idx]] = true;
        }
    }

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let buckets = cfg.profile_buckets;
    let profiles: Vec<Vec<u64>> = (0..n)
        .map(|u| {
            truth
                .user(u)
                .iter()
                .map(|&z| ((std_normal.cdf(z) * buckets as f64) as usize).min(buckets - 1) as u64)
                .collect()
        })
        .collect();
    let item_cat: Vec<u64> = (0..m)
        .map(|i| {
            let z = truth.item(i);
            (0..d).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap_or(0) as u64
        })
        .collect();

    let mut histories: Vec<(Vec<u64>, Vec<u64>, Vec<i64>)> = Vec::with_capacity(n);
    let mut weights = vec![0.0; m];
    for u in 0..n {
        if cold[u] {
            histories.push((Vec::new(), Vec::new(), Vec::new()));
            continue;
        }
        let len = history_len(cfg, &mut rng)?;
        for (i, w) in weights.iter_mut().enumerate() {
            *w = (0..k).map(|s| truth.probability(u, i, s)).sum::<f64>() / k as f64;
        }
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("behavior sampling: {e}")))?;
        let picked: Vec<u64> = (0..len).map(|_| dist.sample(&mut rng) as u64).collect();
        let mut days: Vec<i64> = (0..len)
            .map(|_| rng.random_range(1 - cfg.history_days as i64..=0))
            .collect();
        days.sort_unstable();
        let cats = picked.iter().map(|&i| item_cat[i as usize]).collect();
        histories.push((picked, cats, days));
    }

    let mut records = Vec::with_capacity(k * cfg.days * cfg.impressions_per_day);
    for (s, pool) in pools.iter().enumerate() {
        let mut srng = ChaCha8Rng::seed_from_u64(cfg.seed);
        srng.set_stream(s as u64);
        for day in 1..=cfg.days as i64 {
            for _ in 0..cfg.impressions_per_day {
                let u = if srng.random_bool(cfg.home_scenario_prob) {
                    pool[srng.random_range(0..pool.len())]
                } else {
                    srng.random_range(0..n)
                };
                let i = srng.random_range(0..m);
                let context = srng.random_range(0..cfg.contexts) as u64;
                let label = srng.random_bool(truth.probability(u, i, s)) as u8;
                let (hist_items, hist_cats, hist_days) = histories[u].clone();
                records.push(Record {
                    user_id: u as u64,
                    day,
                    scenario: s as u64,
                    context,
                    item_id: i as u64,
                    item_cat: item_cat[i],
                    profile: profiles[u].clone(),
                    hist_items,
                    hist_cats,
                    hist_days,
                    label,
                });
            }
        }
    }
    records.sort_by_key(|r| (r.day, r.scenario));
    let test_day = cfg.test_day();
    let (test, train): (Vec<Record>, Vec<Record>) = records.into_iter().partition(|r| r.day == test_day);
    Ok(Generated { train, test, truth, home })
}
