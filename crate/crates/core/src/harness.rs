//! Experiment plumbing: dataset files, the training loop with best-epoch
//! selection, evaluation by scenario and by user population, ablations,
//! sweeps and replayable run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{self, read_records, schema_for, write_records, write_records_to, Encoder, GenConfig, Record, Stats};
use crate::embeddings::{Features, Schema};
use crate::error::{Error, Result};
use crate::metrics::{auc_by_group, report, Comparison, GroupAuc, GroupedAuc, Report, RunMetrics};
use crate::model::{Csmn, Variant};

pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const MANIFEST_FORMAT: u32 = 1;

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_context(e, path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn records_sha256(records: &[Record]) -> Result<String> {
    let mut buf = Vec::new();
    write_records_to(&mut buf, records)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

fn io_context(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_context(e, path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_context(e, path))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataHashes {
    pub train_sha256: String,
    pub test_sha256: String,
}

impl DataHashes {
    pub fn of_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            train_sha256: sha256_file(&dir.join(TRAIN_FILE))?,
            test_sha256: sha256_file(&dir.join(TEST_FILE))?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct GenOutput {
    pub train_stats: Stats,
    pub test_stats: Stats,
    pub hashes: DataHashes,
}

/// Generates a dataset into `dir`: the two record files plus text and CSV
/// statistics for each split.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path) -> Result<GenOutput> {
    let generated = data::generate(cfg)?;
    create_dir(dir)?;
    write_records(&dir.join(TRAIN_FILE), &generated.train)?;
    write_records(&dir.join(TEST_FILE), &generated.test)?;
    let train_stats = data::stats(&generated.train, Some(cfg.scenarios))?;
    let test_stats = data::stats(&generated.test, Some(cfg.scenarios))?;
    write_file(&dir.join("stats_train.txt"), train_stats.render_text())?;
    write_file(&dir.join("stats_train.csv"), train_stats.to_csv())?;
    write_file(&dir.join("stats_test.txt"), test_stats.render_text())?;
    write_file(&dir.join("stats_test.csv"), test_stats.to_csv())?;
    Ok(GenOutput {
        train_stats,
        test_stats,
        hashes: DataHashes::of_dir(dir)?,
    })
}

/// Encoded train and test splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub schema: Schema,
    pub train: Vec<Features>,
    pub train_labels: Vec<f64>,
    pub test: Vec<Features>,
    pub test_labels: Vec<f64>,
    pub test_scenarios: Vec<u64>,
    pub test_cold: Vec<bool>,
    /// Hashes of the record files, or of their canonical serialization for
    /// in-memory datasets.
    pub hashes: DataHashes,
}

impl Dataset {
    pub fn from_records(schema: Schema, train: &[Record], test: &[Record]) -> Result<Self> {
        let enc = Encoder::new(schema.clone());
        let label = |r: &Record| f64::from(r.label);
        Ok(Self {
            train: enc.encode_all(train)?,
            train_labels: train.iter().map(label).collect(),
            test: enc.encode_all(test)?,
            test_labels: test.iter().map(label).collect(),
            test_scenarios: test.iter().map(|r| r.scenario).collect(),
            test_cold: test.iter().map(Record::is_cold).collect(),
            schema,
            hashes: DataHashes {
                train_sha256: records_sha256(train)?,
                test_sha256: records_sha256(test)?,
            },
        })
    }

    /// Reads `train.tsv` and `test.tsv` from `dir`.
    pub fn load(dir: &Path, schema: Schema) -> Result<Self> {
        let (train_path, test_path) = (dir.join(TRAIN_FILE), dir.join(TEST_FILE));
        for p in [&train_path, &test_path] {
            if !p.is_file() {
                return Err(Error::InvalidArgument(format!(
                    "dataset file {} not found (generate it first)",
                    p.display()
                )));
            }
        }
        let read = |p: &Path| {
            read_records(p).map_err(|e| match e {
                Error::Parse { line, msg } => Error::Parse {
                    line,
                    msg: format!("{}: {msg}", p.display()),
                },
                other => other,
            })
        };
        let mut ds = Self::from_records(schema, &read(&train_path)?, &read(&test_path)?)?;
        ds.hashes = DataHashes::of_dir(dir)?;
        Ok(ds)
    }

    /// Loads the dataset named by a run config.
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        Self::load(&cfg.train.data_dir, schema_for(&cfg.data, cfg.model.embedding_dim)?)
    }
}

/// AUC by scenario, pooled, and on the cold-start and behavior-rich users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: GroupRecord,
    pub scenarios: BTreeMap<String, GroupRecord>,
    pub cold: GroupRecord,
    pub rich: GroupRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub n: usize,
    pub auc: Option<f64>,
}

impl From<&GroupAuc> for GroupRecord {
    fn from(g: &GroupAuc) -> Self {
        Self { n: g.n, auc: g.auc }
    }
}

impl From<&GroupRecord> for GroupAuc {
    fn from(g: &GroupRecord) -> Self {
        Self { n: g.n, auc: g.auc }
    }
}

const EMPTY: GroupRecord = GroupRecord { n: 0, auc: None };

impl Evaluation {
    pub fn by_scenario(&self) -> GroupedAuc {
        GroupedAuc {
            groups: self.scenarios.iter().map(|(k, v)| (k.clone(), v.into())).collect(),
            overall: (&self.overall).into(),
        }
    }

    pub fn by_population(&self) -> GroupedAuc {
        GroupedAuc {
            groups: [("cold".to_string(), (&self.cold).into()), ("rich".to_string(), (&self.rich).into())]
                .into_iter()
                .filter(|(_, g): &(String, GroupAuc)| g.n > 0)
                .collect(),
            overall: (&self.overall).into(),
        }
    }

    /// Pooled AUC, defined whenever the test day holds both classes.
    pub fn auc(&self) -> Result<f64> {
        self.overall
            .auc
            .ok_or_else(|| Error::UndefinedMetric("test set holds a single class".into()))
    }
}

pub fn evaluate_scores(scores: &[f64], data: &Dataset) -> Result<Evaluation> {
    let by_scenario = auc_by_group(scores, &data.test_labels, &data.test_scenarios)?;
    let pop: Vec<&str> = data.test_cold.iter().map(|&c| if c { "cold" } else { "rich" }).collect();
    let by_pop = auc_by_group(scores, &data.test_labels, &pop)?;
    Ok(Evaluation {
        overall: (&by_scenario.overall).into(),
        scenarios: by_scenario.groups.iter().map(|(k, v)| (k.clone(), v.into())).collect(),
        cold: by_pop.groups.get("cold").map_or(EMPTY, Into::into),
        rich: by_pop.groups.get("rich").map_or(EMPTY, Into::into),
    })
}

pub fn evaluate(model: &Csmn, data: &Dataset) -> Result<Evaluation> {
    evaluate_scores(&model.predict(&data.test)?, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub test_auc: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} loss={:.6} test_auc={:.6}", self.epoch, self.loss, self.test_auc)
    }
}

/// Everything needed to rerun a training run and check its numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub best_epoch: usize,
    pub data: DataHashes,
    pub config: RunConfig,
    pub epochs: Vec<EpochLog>,
    pub metrics: Evaluation,
}

impl Manifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("manifest: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        if m.format != MANIFEST_FORMAT {
            return Err(Error::Config(format!("unsupported manifest format {}", m.format)));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| io_context(e, path))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_toml()?)
    }

    pub fn run_metrics(&self, name: impl Into<String>) -> RunMetrics {
        RunMetrics {
            name: name.into(),
            seed: self.config.model.seed,
            aucs: self.metrics.by_scenario(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub manifest: Manifest,
    pub best: Csmn,
    /// The model after the last epoch.
    pub last: Csmn,
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains for `cfg.train.epochs` epochs, evaluating on the test day after
/// each. The best epoch by test AUC is kept; with zero epochs the
/// initialized model is. When `out` is given, the log, the best checkpoint
/// (rewritten on every improvement) and the manifest land there. A
/// diverging step aborts with the last good checkpoint left in place.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() && cfg.train.epochs > 0 {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let mut log_lines = String::new();
    let mut emit = |line: String, log: &mut dyn FnMut(&str)| -> Result<()> {
        log(&line);
        if let Some(dir) = out {
            log_lines.push_str(&line);
            log_lines.push('\n');
            write_file(&dir.join(LOG_FILE), &log_lines)?;
        }
        Ok(())
    };
    let save = |model: &Csmn| -> Result<()> {
        match out {
            Some(dir) => checkpoint::save(model, &dir.join(CHECKPOINT_FILE)),
            None => Ok(()),
        }
    };

    let mut model = Csmn::new(cfg.model.clone(), data.schema.clone())?;
    let mut best = (0, model.clone(), evaluate(&model, data)?);
    save(&model)?;
    let mut epochs = Vec::new();
    let bs = cfg.model.batch_size;
    for epoch in 1..=cfg.train.epochs {
        let order = data::batch_indices(
            data.train.len(),
            bs,
            cfg.train.shuffle.then(|| shuffle_seed(cfg.model.seed, epoch)),
        );
        let (mut total, mut count) = (0.0, 0usize);
        for idx in &order {
            let batch: Vec<Features> = idx.iter().map(|&i| data.train[i].clone()).collect();
            let labels: Vec<f64> = idx.iter().map(|&i| data.train_labels[i]).collect();
            let loss = match model.train_step(&batch, &labels) {
                Ok(l) => l,
                Err(e) => {
                    emit(format!("epoch={epoch} aborted: {e}"), log)?;
                    return Err(e);
                }
            };
            total += loss * idx.len() as f64;
            count += idx.len();
        }
        let eval = evaluate(&model, data)?;
        let entry = EpochLog {
            epoch,
            loss: total / count as f64,
            test_auc: eval.auc()?,
        };
        emit(entry.to_string(), log)?;
        epochs.push(entry);
        if best.0 == 0 || eval.auc()? > best.2.auc()? {
            best = (epoch, model.clone(), eval);
            save(&model)?;
        }
    }

    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        best_epoch: best.0,
        data: data.hashes.clone(),
        config: cfg.clone(),
        epochs,
        metrics: best.2,
    };
    if let Some(dir) = out {
        manifest.save(&dir.join(MANIFEST_FILE))?;
    }
    emit(
        format!(
            "best_epoch={} test_auc={:.6} cold_auc={} rich_auc={}",
            manifest.best_epoch,
            manifest.metrics.auc()?,
            fmt_opt(manifest.metrics.cold.auc),
            fmt_opt(manifest.metrics.rich.auc)
        ),
        log,
    )?;
    Ok(TrainOutcome {
        manifest,
        best: best.1,
        last: model,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.6}"))
}

/// Per-group AUC table of one evaluation.
pub fn render_evaluation(eval: &Evaluation) -> String {
    let mut out = String::from("group      n        auc\n");
    let rows = eval
        .scenarios
        .iter()
        .map(|(k, v)| (format!("scenario {k}"), v))
        .chain([
            ("cold".to_string(), &eval.cold),
            ("rich".to_string(), &eval.rich),
            ("overall".to_string(), &eval.overall),
        ]);
    for (name, g) in rows {
        out.push_str(&format!("{name:<10} {:>8} {:>9}\n", g.n, fmt_opt(g.auc)));
    }
    out
}

/// Reports written by an ablation or sweep.
#[derive(Clone, Debug)]
pub struct Comparative {
    pub manifests: Vec<(String, Manifest)>,
    /// AUC per scenario.
    pub scenarios: Report,
    /// AUC on cold-start and behavior-rich users.
    pub populations: Report,
}

fn comparative(runs: Vec<(String, Manifest)>, comparison: &Comparison, out: Option<&Path>) -> Result<Comparative> {
    let by_scenario: Vec<RunMetrics> = runs.iter().map(|(n, m)| m.run_metrics(n.clone())).collect();
    let by_pop: Vec<RunMetrics> = runs
        .iter()
        .map(|(n, m)| RunMetrics {
            name: n.clone(),
            seed: m.config.model.seed,
            aucs: m.metrics.by_population(),
        })
        .collect();
    let scenarios = report(&by_scenario, comparison)?;
    let populations = report(&by_pop, comparison)?;
    if let Some(dir) = out {
        write_file(&dir.join("report.txt"), &scenarios.text)?;
        write_file(&dir.join("report.csv"), &scenarios.csv)?;
        write_file(&dir.join("populations.txt"), &populations.text)?;
        write_file(&dir.join("populations.csv"), &populations.csv)?;
    }
    Ok(Comparative {
        manifests: runs,
        scenarios,
        populations,
    })
}

fn seed_dir(out: Option<&Path>, family: &str, seed: u64) -> Option<PathBuf> {
    out.map(|d| d.join(family).join(format!("seed={seed}")))
}

/// Trains every variant on every seed and compares `full` against each.
pub fn ablate(
    cfg: &RunConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<Comparative> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one variant and one seed".into()));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let mut run = cfg.clone();
            run.model.variant = variant;
            run.model.seed = seed;
            log(&format!("run variant={variant} seed={seed}"));
            let dir = seed_dir(out, variant.as_str(), seed);
            let outcome = train(&run, data, dir.as_deref(), log)?;
            runs.push((variant.to_string(), outcome.manifest));
        }
    }
    let comparison = if variants.contains(&Variant::Full) {
        Comparison::TargetOver(Variant::Full.to_string())
    } else {
        Comparison::None
    };
    comparative(runs, &comparison, out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Number of memory slots.
    Slots,
    /// Key and value update rates, set to the same value.
    UpdateRate,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Slots => "q",
            SweepParam::UpdateRate => "update_rate",
        }
    }

    /// Applies one sweep value to a config.
    pub fn apply(self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepParam::Slots => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::InvalidArgument(format!("q must be a positive integer, got {value}")));
                }
                cfg.model.memory_slots = value as usize;
            }
            SweepParam::UpdateRate => {
                cfg.model.alpha_key = value;
                cfg.model.alpha_value = value;
            }
        }
        cfg.validate()
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" | "memory_slots" => Ok(SweepParam::Slots),
            "update_rate" => Ok(SweepParam::UpdateRate),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep parameter `{other}` (expected q or update_rate)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sweep {
    pub runs: Comparative,
    /// `(value, mean test AUC over seeds)` in sweep order.
    pub curve: Vec<(f64, f64)>,
}

/// Trains the configured variant once per (value, seed).
pub fn sweep(
    cfg: &RunConfig,
    data: &Dataset,
    param: SweepParam,
    values: &[f64],
    seeds: &[u64],
    out: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<Sweep> {
    if seeds.is_empty() || values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value and one seed".into()));
    }
    let mut runs = Vec::new();
    let mut curve = Vec::new();
    for &value in values {
        let family = format!("{param}={value}");
        let mut aucs = Vec::new();
        for &seed in seeds {
            let mut run = cfg.clone();
            param.apply(&mut run, value)?;
            run.model.seed = seed;
            log(&format!("run {family} seed={seed}"));
            let dir = seed_dir(out, &family, seed);
            let outcome = train(&run, data, dir.as_deref(), log)?;
            aucs.push(outcome.manifest.metrics.auc()?);
            runs.push((family.clone(), outcome.manifest));
        }
        curve.push((value, aucs.iter().sum::<f64>() / aucs.len() as f64));
    }
    let runs = comparative(runs, &Comparison::None, out)?;
    if let Some(dir) = out {
        let mut text = format!("{param},mean_auc\n");
        for (v, a) in &curve {
            text.push_str(&format!("{v},{a:.6}\n"));
        }
        write_file(&dir.join("curve.csv"), text)?;
    }
    Ok(Sweep { runs, curve })
}

/// Outcome of rerunning a manifest.
#[derive(Clone, Debug)]
pub struct Replay {
    pub original: Manifest,
    pub rerun: Manifest,
    /// Human-readable differences; empty when the rerun matches bit for bit.
    pub differences: Vec<String>,
}

impl Replay {
    pub fn matches(&self) -> bool {
        self.differences.is_empty()
    }
}

/// Reruns the training recorded in `manifest` on the dataset in `data_dir`
/// (the manifest's own data directory when `None`) and compares every
/// logged number exactly.
pub fn replay(manifest: &Manifest, data_dir: Option<&Path>, log: &mut dyn FnMut(&str)) -> Result<Replay> {
    let mut cfg = manifest.config.clone();
    if let Some(dir) = data_dir {
        cfg.train.data_dir = dir.to_path_buf();
    }
    let data = Dataset::for_config(&cfg)?;
    if data.hashes != manifest.data {
        return Err(Error::InvalidArgument(format!(
            "dataset in {} does not match the manifest hashes",
            cfg.train.data_dir.display()
        )));
    }
    let rerun = train(&cfg, &data, None, log)?.manifest;
    let mut differences = Vec::new();
    let original_epochs = &manifest.epochs;
    if original_epochs.len() != rerun.epochs.len() {
        differences.push(format!("epoch count {} vs {}", original_epochs.len(), rerun.epochs.len()));
    }
    for (a, b) in original_epochs.iter().zip(&rerun.epochs) {
        if a.loss.to_bits() != b.loss.to_bits() || a.test_auc.to_bits() != b.test_auc.to_bits() {
            differences.push(format!("logged `{a}` but rerun gave `{b}`"));
        }
    }
    if manifest.best_epoch != rerun.best_epoch {
        differences.push(format!("best epoch {} vs {}", manifest.best_epoch, rerun.best_epoch));
    }
    if !same_bits(&manifest.metrics, &rerun.metrics) {
        differences.push("final metrics differ".into());
    }
    Ok(Replay {
        original: manifest.clone(),
        rerun,
        differences,
    })
}

fn same_bits(a: &Evaluation, b: &Evaluation) -> bool {
    let eq = |x: &GroupRecord, y: &GroupRecord| x.n == y.n && x.auc.map(f64::to_bits) == y.auc.map(f64::to_bits);
    eq(&a.overall, &b.overall)
        && eq(&a.cold, &b.cold)
        && eq(&a.rich, &b.rich)
        && a.scenarios.len() == b.scenarios.len()
        && a.scenarios.iter().zip(&b.scenarios).all(|((ka, x), (kb, y))| ka == kb && eq(x, y))
}

/// Collects manifests under `root` (recursively) into one report. Runs are
/// named by their variant unless a name is given by the directory layout
/// `<family>/seed=<s>/manifest.toml`.
pub fn collect_manifests(root: &Path) -> Result<Vec<(String, Manifest)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let manifest = dir.join(MANIFEST_FILE);
        if manifest.is_file() {
            let m = Manifest::load(&manifest)?;
            let family = dir
                .file_name()
                .and_then(|n| n.to_str())
                .filter(|n| n.starts_with("seed="))
                .and_then(|_| dir.parent()?.file_name()?.to_str())
                .map_or_else(|| m.config.model.variant.to_string(), str::to_string);
            found.push((family, m));
        }
        let entries = fs::read_dir(&dir).map_err(|e| io_context(e, &dir))?;
        let mut subdirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        stack.extend(subdirs.into_iter().rev());
    }
    found.sort_by(|a, b| (&a.0, a.1.config.model.seed).cmp(&(&b.0, b.1.config.model.seed)));
    Ok(found)
}

/// Builds the comparative reports for previously completed runs.
pub fn report_runs(runs: Vec<(String, Manifest)>, comparison: &Comparison) -> Result<Comparative> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("no run manifests found".into()));
    }
    comparative(runs, comparison, None)
}
