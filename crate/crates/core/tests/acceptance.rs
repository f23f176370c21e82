//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test -p csmn-core --test acceptance`, or pick
//! criteria by number: `cargo test -p csmn-core --test acceptance -- 1 4 9`.
//! Criteria 7 and 8 train 15 desk-scale models and take about an hour on a
//! single core.

use std::cell::OnceCell;
use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use csmn_core::autodiff::{finite_diff_check, sample_active_coords, Graph};
use csmn_core::checkpoint;
use csmn_core::config::RunConfig;
use csmn_core::data::{generate, schema_for, GenConfig, PerScenario, Record};
use csmn_core::harness::{self, Dataset, Manifest, SweepParam};
use csmn_core::metrics::{auc, ri, CSV_HEADER};
use csmn_core::model::{Csmn, Variant};
use csmn_core::uipn::project;
use csmn_core::urmn::{Memory, Mode};
use csmn_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn desk_config() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    RunConfig::load(&path, &["data.cold_start_ratio=0.3".to_string()]).expect("desk config loads")
}

fn desk_records(cfg: &GenConfig) -> (Vec<Record>, Vec<Record>) {
    let g = generate(cfg).expect("desk data generates");
    (g.train, g.test)
}

fn dataset(cfg: &RunConfig, train: &[Record], test: &[Record]) -> Dataset {
    Dataset::from_records(schema_for(&cfg.data, cfg.model.embedding_dim).unwrap(), train, test).unwrap()
}

fn within(elapsed: Duration, limit: Duration) -> (bool, String) {
    (elapsed < limit, format!("{:.1}s of {}s", elapsed.as_secs_f64(), limit.as_secs()))
}

// 1
fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut cfg = desk_config();
    cfg.model.dropout = 0.0;
    cfg.model.memory_writes = false;
    let small = GenConfig {
        users: 300,
        items: 200,
        days: 2,
        impressions_per_day: 20,
        ..cfg.data.clone()
    };
    let (train, _) = desk_records(&small);
    // Two behavior-rich samples and two cold ones.
    let mut picked: Vec<&Record> = train.iter().filter(|r| !r.is_cold()).take(2).collect();
    picked.extend(train.iter().filter(|r| r.is_cold()).take(2));
    let records: Vec<Record> = picked.into_iter().cloned().collect();
    let schema = schema_for(&small, cfg.model.embedding_dim).map_err(err)?;
    let data = Dataset::from_records(schema.clone(), &records, &records).map_err(err)?;
    let mut model = Csmn::new(cfg.model.clone(), schema).map_err(err)?;
    let (batch, y) = (&data.train, &data.train_labels);
    let mut g = Graph::new();
    let out = model.forward(&mut g, batch, Mode::Train).map_err(err)?;
    let loss = g.bce(out.probs, y).map_err(err)?;
    g.backward(loss, model.params_mut()).map_err(err)?;
    let ids: Vec<_> = model.params().ids().collect();
    let coords = sample_active_coords(model.params(), &ids, 8, &mut ChaCha8Rng::seed_from_u64(5));
    let groups: std::collections::BTreeSet<&str> = coords
        .iter()
        .map(|&(id, _)| model.params().name(id).split('.').next().unwrap_or(""))
        .collect();
    let frozen = model.clone();
    let mut store = model.params().clone();
    let report = finite_diff_check(&mut store, &coords, 1e-5, |s| {
        let mut m = frozen.clone();
        *m.params_mut() = s.clone();
        m.loss(batch, y)
    })
    .map_err(err)?;
    let (fast, time) = within(start.elapsed(), Duration::from_secs(30));
    Ok((
        report.checked >= 200 && report.max_rel_err < 1e-4 && fast,
        format!(
            "max rel err {:.2e} (tol 1e-4) over {} coords in {} tensors, groups {:?}; {time}",
            report.max_rel_err,
            report.checked,
            ids.len(),
            groups
        ),
    ))
}

// 2
fn projection_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = [0.0f64; 3];
    for _ in 0..1000 {
        let d = rng.random_range(2..12);
        let mut v = || (0..d).map(|_| rng.random_range(-3.0..3.0)).collect::<Vec<f64>>();
        let (a, c, b) = (v(), v(), v());
        let (x, y): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let p = project(&a, &b).map_err(err)?;
        let pp = project(&p, &b).map_err(err)?;
        let idem = p.iter().zip(&pp).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        let resid: f64 = a.iter().zip(&p).zip(&b).map(|((ai, pi), bi)| (ai - pi) * bi).sum();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let orth = resid.abs() / nb;
        let comb: Vec<f64> = a.iter().zip(&c).map(|(ai, ci)| x * ai + y * ci).collect();
        let lhs = project(&comb, &b).map_err(err)?;
        let pc = project(&c, &b).map_err(err)?;
        let lin = lhs
            .iter()
            .zip(p.iter().zip(&pc))
            .map(|(l, (pa, pc))| (l - (x * pa + y * pc)).abs())
            .fold(0.0, f64::max);
        for (w, v) in worst.iter_mut().zip([idem, orth, lin]) {
            *w = w.max(v);
        }
    }
    let example = project(&[3.0, 4.0], &[0.0, 2.0]).map_err(err)?;
    let ex_err = (example[0] - 0.0).abs().max((example[1] - 4.0).abs());
    Ok((
        worst.iter().all(|&w| w < 1e-9) && ex_err < 1e-12,
        format!(
            "1000 pairs: idempotence {:.1e}, orthogonality {:.1e}, linearity {:.1e} (tol 1e-9); project([3,4],[0,2]) = {example:?} (tol 1e-12)",
            worst[0], worst[1], worst[2]
        ),
    ))
}

// 3
fn memory_equations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mem = Memory::new(4, 3, 2, 0.0, 0.0, &mut rng).map_err(err)?;
    let before = mem.clone();
    mem.write(Mode::Train, &[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0, 3.0], &[4.0, 5.0])
        .map_err(err)?;
    let frozen = mem.keys().data().iter().zip(before.keys().data()).all(|(a, b)| a.to_bits() == b.to_bits())
        && mem.values().data().iter().zip(before.values().data()).all(|(a, b)| a.to_bits() == b.to_bits());

    let mut one = Memory::from_parts(
        Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap(),
        Tensor::matrix(1, 2, vec![0.1, 0.1]).unwrap(),
        1.0,
        1.0,
    )
    .map_err(err)?;
    one.write(Mode::Train, &[1.0], &[0.3, 0.5], &[2.0, -1.0]).map_err(err)?;
    let overwrite = one.keys().data() == [0.3, 0.5] && one.values().data() == [2.0, -1.0];

    // α_k = 0.3, w = 0.5, SK = [1, 0], Key = [0, 1]: 0.3 * 0.5 * [1, 0] + 0.7 * [0, 1].
    let mut half = Memory::from_parts(
        Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap(),
        Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap(),
        0.3,
        0.3,
    )
    .map_err(err)?;
    half.write(Mode::Train, &[0.5, 0.5], &[1.0, 0.0], &[0.0]).map_err(err)?;
    let k = half.keys().row(0);
    let worked = (k[0] - 0.15).abs().max((k[1] - 0.7).abs());

    let mut sum_err = 0.0f64;
    for _ in 0..1000 {
        let q = rng.random_range(1..40);
        let dk = rng.random_range(1..10);
        let m = Memory::new(q, dk, 3, 0.3, 0.3, &mut rng).map_err(err)?;
        let key: Vec<f64> = (0..dk).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (w, _) = m.read_plain(&key).map_err(err)?;
        sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
    }
    Ok((
        frozen && overwrite && worked < 1e-12 && sum_err < 1e-9,
        format!(
            "alpha=0 bit-identical: {frozen}; alpha=1,w=1 overwrite exact: {overwrite}; worked example {:?} err {worked:.1e} (tol 1e-12); read weight sums off by at most {sum_err:.1e} over 1000 memories (tol 1e-9)",
            k
        ),
    ))
}

fn brute_force_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

// 4
fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut exact = 0;
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..20);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let fast = auc(&scores, &labels).map_err(err)?;
        let slow = brute_force_auc(&scores, &labels);
        if fast == slow {
            exact += 1;
        }
        worst = worst.max((fast - slow).abs());
    }
    let example = auc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).map_err(err)?;
    Ok((
        exact == 500 && example == 0.75,
        format!("{exact}/500 instances equal the all-pairs oracle exactly (largest gap {worst:e}); worked example = {example}"),
    ))
}

// 5
fn ri_arithmetic() -> Outcome {
    let overall = ri(0.7001, 0.6954).map_err(err)?;
    let first = ri(0.6546, 0.6527).map_err(err)?;
    let ok = (overall - 2.41).abs() <= 0.005 && (first - 1.24).abs() <= 0.005;
    Ok((
        ok,
        format!("ri(0.7001, 0.6954) = {overall:.4}% (want 2.41 +/- 0.005), ri(0.6546, 0.6527) = {first:.4}% (want 1.24 +/- 0.005)"),
    ))
}

// 6
fn overfit() -> Outcome {
    let start = Instant::now();
    let mut cfg = desk_config();
    cfg.model.learning_rate = 0.01;
    let small = GenConfig {
        users: 300,
        items: 200,
        days: 2,
        impressions_per_day: 20,
        ..cfg.data.clone()
    };
    let (train, _) = desk_records(&small);
    let records = &train[..10];
    let schema = schema_for(&small, cfg.model.embedding_dim).map_err(err)?;
    let data = Dataset::from_records(schema.clone(), records, records).map_err(err)?;
    let mut model = Csmn::new(cfg.model.clone(), schema).map_err(err)?;
    let mut reached = None;
    let mut last = f64::NAN;
    for step in 1..=200 {
        last = model.train_step(&data.train, &data.train_labels).map_err(err)?;
        if last < 0.1 {
            reached = Some(step);
            break;
        }
    }
    let (fast, time) = within(start.elapsed(), Duration::from_secs(60));
    let positives = data.train_labels.iter().filter(|&&y| y == 1.0).count();
    Ok((
        reached.is_some() && fast,
        match reached {
            Some(s) => format!("training loss {last:.4} < 0.1 after {s} steps ({positives}/10 positives, dropout {}); {time}", cfg.model.dropout),
            None => format!("training loss still {last:.4} after 200 steps; {time}"),
        },
    ))
}

struct AblationRuns {
    /// variant -> per-seed (overall, cold, rich) AUC.
    aucs: HashMap<Variant, Vec<(f64, f64, f64)>>,
    seeds: Vec<u64>,
    elapsed: Duration,
}

const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn ablation_runs() -> Result<AblationRuns, String> {
    let start = Instant::now();
    let cfg = desk_config();
    let (train, test) = desk_records(&cfg.data);
    let data = dataset(&cfg, &train, &test);
    let variants = [Variant::Full, Variant::WoUrmn, Variant::WoUipnTAttention];
    let mut progress = |line: &str| {
        if line.starts_with("run ") || line.starts_with("best_epoch") {
            eprintln!("    {line}");
        }
    };
    let out = harness::ablate(&cfg, &data, &variants, &ABLATION_SEEDS, None, &mut progress).map_err(err)?;
    let mut aucs: HashMap<Variant, Vec<(f64, f64, f64)>> = HashMap::new();
    for (name, m) in &out.manifests {
        let v: Variant = name.parse().map_err(err)?;
        let e = &m.metrics;
        let get = |a: Option<f64>| a.ok_or_else(|| format!("{name}: undefined AUC"));
        aucs.entry(v)
            .or_default()
            .push((get(e.overall.auc)?, get(e.cold.auc)?, get(e.rich.auc)?));
    }
    eprintln!("{}", out.scenarios.text);
    eprintln!("{}", out.populations.text);
    Ok(AblationRuns {
        aucs,
        seeds: ABLATION_SEEDS.to_vec(),
        elapsed: start.elapsed(),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let all: Vec<f64> = v.collect();
    all.iter().sum::<f64>() / all.len() as f64
}

// 7
fn directional_ablation(runs: &AblationRuns) -> Outcome {
    let full = &runs.aucs[&Variant::Full];
    let mut ok = true;
    let mut parts = Vec::new();
    for base in [Variant::WoUrmn, Variant::WoUipnTAttention] {
        let other = &runs.aucs[&base];
        let gap = mean(full.iter().map(|r| r.0)) - mean(other.iter().map(|r| r.0));
        let agree = full.iter().zip(other).filter(|(f, o)| f.0 > o.0).count();
        ok &= gap > 0.0 && agree >= 4;
        parts.push(format!("full - {base} = {gap:+.4} mean AUC, full ahead on {agree}/{} seeds", runs.seeds.len()));
    }
    let (fast, time) = within(runs.elapsed, Duration::from_secs(2 * 3600));
    Ok((ok && fast, format!("{}; {time}", parts.join("; "))))
}

// 8
fn cold_start_mechanism(runs: &AblationRuns) -> Outcome {
    let full = &runs.aucs[&Variant::Full];
    let base = &runs.aucs[&Variant::WoUrmn];
    let cold_gain = mean(full.iter().map(|r| r.1)) - mean(base.iter().map(|r| r.1));
    let rich_gain = mean(full.iter().map(|r| r.2)) - mean(base.iter().map(|r| r.2));
    Ok((
        cold_gain > rich_gain,
        format!(
            "full - wo_urmn over {} seeds: cold-start users {cold_gain:+.4} AUC, behavior-rich users {rich_gain:+.4} AUC",
            runs.seeds.len()
        ),
    ))
}

fn well_formed(report_csv: &str, families: usize, scenarios: usize) -> Result<(), String> {
    let mut lines = report_csv.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("bad CSV header".into());
    }
    let rows: Vec<&str> = lines.collect();
    if rows.len() != families * (scenarios + 1) {
        return Err(format!("{} rows, expected {}", rows.len(), families * (scenarios + 1)));
    }
    for r in rows {
        let cells: Vec<&str> = r.split(',').collect();
        if cells.len() != 5 || cells[3].parse::<f64>().is_err() || cells[2].parse::<usize>().is_err() {
            return Err(format!("malformed row `{r}`"));
        }
    }
    Ok(())
}

fn same_numbers(a: &Manifest, b: &Manifest) -> bool {
    a.epochs.len() == b.epochs.len()
        && a.epochs
            .iter()
            .zip(&b.epochs)
            .all(|(x, y)| x.loss.to_bits() == y.loss.to_bits() && x.test_auc.to_bits() == y.test_auc.to_bits())
        && a.metrics == b.metrics
}

// 9
fn sweep_consistency() -> Outcome {
    let mut cfg = desk_config();
    cfg.train.epochs = 1;
    let (train, test) = desk_records(&cfg.data);
    let data = dataset(&cfg, &train, &test);
    let scenarios = cfg.data.scenarios;
    let mut quiet = |_: &str| {};
    let rates = [0.0, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0];
    let rate_sweep = harness::sweep(&cfg, &data, SweepParam::UpdateRate, &rates, &[1], None, &mut quiet).map_err(err)?;
    let slots = [1.0, 8.0, 64.0, 512.0];
    let slot_sweep = harness::sweep(&cfg, &data, SweepParam::Slots, &slots, &[1], None, &mut quiet).map_err(err)?;

    let mut disabled = cfg.clone();
    disabled.model.memory_writes = false;
    disabled.model.seed = 1;
    let reference = harness::train(&disabled, &data, None, &mut quiet).map_err(err)?.manifest;
    let zero_rate = &rate_sweep.runs.manifests[0].1;
    let exact = same_numbers(zero_rate, &reference);

    let shapes = well_formed(&rate_sweep.runs.scenarios.csv, rates.len(), scenarios)
        .and_then(|_| well_formed(&slot_sweep.runs.scenarios.csv, slots.len(), scenarios));
    let curve = |s: &harness::Sweep| {
        s.curve
            .iter()
            .map(|(v, a)| format!("{v}:{a:.4}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Ok((
        exact && shapes.is_ok() && rate_sweep.curve.len() == 7 && slot_sweep.curve.len() == 4,
        format!(
            "rate 0.0 matches writes-disabled run bit for bit: {exact}; reports: {}; update_rate curve [{}]; q curve [{}]",
            shapes.err().unwrap_or_else(|| "well-formed".into()),
            curve(&rate_sweep),
            curve(&slot_sweep)
        ),
    ))
}

// 10
fn determinism_and_persistence() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut cfg = desk_config();
    cfg.data = GenConfig {
        users: 2000,
        items: 400,
        days: 4,
        impressions_per_day: 300,
        cold_start_ratio: PerScenario::Uniform(0.3),
        ..cfg.data
    };
    cfg.train.epochs = 2;
    cfg.train.data_dir = tmp.path().join("data");
    harness::generate_dataset(&cfg.data, &cfg.train.data_dir).map_err(err)?;
    let data = Dataset::for_config(&cfg).map_err(err)?;
    let run_dir = tmp.path().join("run");
    let outcome = harness::train(&cfg, &data, Some(&run_dir), &mut |_| {}).map_err(err)?;
    let manifest = Manifest::load(&run_dir.join(harness::MANIFEST_FILE)).map_err(err)?;
    let replay = harness::replay(&manifest, None, &mut |_| {}).map_err(err)?;

    let restored = checkpoint::load(&run_dir.join(harness::CHECKPOINT_FILE)).map_err(err)?;
    let held_out = &data.test[..data.test.len().min(256)];
    let a = outcome.best.predict(held_out).map_err(err)?;
    let b = restored.predict(held_out).map_err(err)?;
    let identical = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok((
        replay.matches() && identical,
        format!(
            "replay of a {}-epoch manifest: {}; checkpoint predictions on {} held-out samples bit-identical: {identical}",
            manifest.epochs.len(),
            if replay.matches() { "bit-exact".to_string() } else { replay.differences.join("; ") },
            held_out.len()
        ),
    ))
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let ablation: OnceCell<Result<AblationRuns, String>> = OnceCell::new();
    let names = [
        "gradient fidelity",
        "projection algebra",
        "memory equations",
        "metric oracle",
        "relative improvement arithmetic",
        "overfit sanity",
        "directional ablation",
        "cold-start mechanism",
        "sweep consistency",
        "determinism and persistence",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = match n {
            1 => gradient_fidelity(),
            2 => projection_algebra(),
            3 => memory_equations(),
            4 => metric_oracle(),
            5 => ri_arithmetic(),
            6 => overfit(),
            7 | 8 => match ablation.get_or_init(ablation_runs) {
                Ok(runs) if n == 7 => directional_ablation(runs),
                Ok(runs) => cold_start_mechanism(runs),
                Err(e) => Err(e.clone()),
            },
            9 => sweep_consistency(),
            _ => determinism_and_persistence(),
        };
        let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] {n:>2} {name}: {detail} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
