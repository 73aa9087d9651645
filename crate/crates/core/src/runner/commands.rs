use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, BUILD_ID};
use super::results::{append_csv_row, append_record, RunRecord};
use crate::autodiff::ParamStore;
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::data::{
    generate_synthetic, ingest_impressions, ingest_jsonl, write_jsonl, Impression, UserRecord, Vocabulary, WorldMeta,
};
use crate::error::{Error, Result};
use crate::finetune::{
    class_labels, ctr_split, demo_split, evaluate_classifier, evaluate_ctr, impression_owners, task_rng,
    train_classifier, train_ctr, Downstream, FinetuneRun, HeadSpec, Regime, Split, Task,
};
use crate::model::{ModelConfig, UserModel};
use crate::pretrain::{pretrain, write_loss_csv, Corpus, PretrainReport};

pub const PRETRAIN_FILE: &str = "pretrain.jsonl";
pub const DEMO_FILE: &str = "demo.jsonl";
pub const CTR_FILE: &str = "ctr.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const META_FILE: &str = "world_meta.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const RESULTS_FILE: &str = "results.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const PRETRAINED_FILE: &str = "pretrained.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretrained,
    Downstream,
}

/// The JSON blob stored in every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub experiment: ExperimentConfig,
    pub config_hash: String,
    pub build_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downstream: Option<DownstreamMeta>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamMeta {
    pub task: Task,
    pub regime: Regime,
    pub label_fraction: f64,
    pub seed: u64,
    pub n_classes: Option<usize>,
    pub n_train: usize,
}

impl CheckpointMeta {
    fn spec(&self) -> Result<HeadSpec> {
        let d = self
            .downstream
            .as_ref()
            .ok_or_else(|| Error::Usage("expected a fine-tuned checkpoint, got a pre-trained one".into()))?;
        Ok(match (d.task, d.n_classes) {
            (Task::Ctr, _) => HeadSpec::Ctr,
            (Task::Demo, Some(c)) => HeadSpec::Class(c),
            (Task::Demo, None) => return Err(Error::Checkpoint("classification checkpoint without n_classes".into())),
        })
    }
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, store: &ParamStore) -> Result<()> {
    let blob = serde_json::to_string(meta)?;
    Checkpoint::from_store(blob, store).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamStore)> {
    let ckpt = Checkpoint::load(path)?;
    Ok((ckpt.config_json()?, ckpt.to_store()?))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml_string()?.as_bytes())
}

/// Generates a synthetic world into `out`: the three datasets, the
/// vocabulary of the pre-training corpus and the world metadata.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<WorldMeta> {
    create_dir(out)?;
    let world = generate_synthetic(&cfg.world)?;
    write_jsonl(&out.join(PRETRAIN_FILE), &world.pretrain)?;
    write_jsonl(&out.join(DEMO_FILE), &world.demo)?;
    write_jsonl(&out.join(CTR_FILE), &world.ctr)?;
    let titles = world
        .pretrain
        .iter()
        .flat_map(|u| u.behaviors.iter().map(String::as_str));
    Vocabulary::build(titles, cfg.data.min_freq)?.save(&out.join(VOCAB_FILE))?;
    let mut meta = serde_json::to_string_pretty(&world.meta)?;
    meta.push('\n');
    write_atomic(&out.join(META_FILE), meta.as_bytes())?;
    write_config(cfg, out)?;
    Ok(world.meta)
}

/// Rebuilds `vocab.txt` in `data_dir` from its pre-training corpus.
pub fn build_vocab(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<Vocabulary> {
    let vocab = Vocabulary::build_from_files(&[data_dir.join(PRETRAIN_FILE)], cfg.data.min_freq)?;
    vocab.save(out)?;
    Ok(vocab)
}

pub fn load_vocab(data_dir: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&data_dir.join(VOCAB_FILE))
}

pub fn load_users(data_dir: &Path, file: &str, vocab: &Vocabulary, cfg: &ExperimentConfig) -> Result<Vec<UserRecord>> {
    Ok(ingest_jsonl(&data_dir.join(file), vocab, cfg.data.limits())?.records)
}

pub fn load_impressions(data_dir: &Path, vocab: &Vocabulary, cfg: &ExperimentConfig) -> Result<Vec<Impression>> {
    ingest_impressions(&data_dir.join(CTR_FILE), vocab, cfg.data.limits())
}

/// Pre-trains a fresh user model on `corpus`.
pub fn pretrain_model(
    cfg: &ExperimentConfig,
    vocab_size: usize,
    corpus: &Corpus,
) -> Result<(ModelConfig, ParamStore, PretrainReport)> {
    let model_cfg = cfg.model.with_vocab(vocab_size);
    let mut store = ParamStore::new();
    let model = UserModel::new(
        &mut store,
        crate::finetune::USER_PREFIX,
        &model_cfg,
        &mut task_rng(cfg.pretrain.seed, "pretrain.init"),
    )?;
    let report = pretrain(&model, &mut store, corpus, &cfg.pretrain)?;
    Ok((model_cfg, store, report))
}

pub struct PretrainOutput {
    pub report: PretrainReport,
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
}

/// Pre-trains on `data_dir` and writes the checkpoint and loss CSV to `out`.
pub fn run_pretrain(cfg: &ExperimentConfig, data_dir: &Path, out: &Path) -> Result<PretrainOutput> {
    let vocab = load_vocab(data_dir)?;
    let corpus = Corpus::new(load_users(data_dir, PRETRAIN_FILE, &vocab, cfg)?);
    let (model_cfg, store, report) = pretrain_model(cfg, vocab.len(), &corpus)?;
    create_dir(out)?;
    let loss_csv = out.join(LOSS_FILE);
    let mut buf = Vec::new();
    write_loss_csv(&mut buf, &report.rows).map_err(|e| Error::io(&loss_csv, e))?;
    write_atomic(&loss_csv, &buf)?;
    let meta = CheckpointMeta {
        kind: CheckpointKind::Pretrained,
        model: model_cfg,
        experiment: cfg.clone(),
        config_hash: cfg.hash(),
        build_id: BUILD_ID.to_string(),
        downstream: None,
    };
    let checkpoint = out.join(PRETRAINED_FILE);
    save_checkpoint(&checkpoint, &meta, &store)?;
    write_config(cfg, out)?;
    Ok(PretrainOutput {
        report,
        checkpoint,
        loss_csv,
    })
}

/// Downstream data of one task.
pub enum TaskData {
    Demo {
        users: Vec<UserRecord>,
    },
    Ctr {
        users: Vec<UserRecord>,
        impressions: Vec<Impression>,
    },
}

impl TaskData {
    pub fn load(data_dir: &Path, task: Task, vocab: &Vocabulary, cfg: &ExperimentConfig) -> Result<Self> {
        let users = load_users(data_dir, DEMO_FILE, vocab, cfg)?;
        Ok(match task {
            Task::Demo => TaskData::Demo { users },
            Task::Ctr => TaskData::Ctr {
                users,
                impressions: load_impressions(data_dir, vocab, cfg)?,
            },
        })
    }

    pub fn task(&self) -> Task {
        match self {
            TaskData::Demo { .. } => Task::Demo,
            TaskData::Ctr { .. } => Task::Ctr,
        }
    }
}

/// Trains one downstream model in memory.
pub fn finetune_once(
    cfg: &ExperimentConfig,
    model_cfg: &ModelConfig,
    pretrained: Option<&ParamStore>,
    data: &TaskData,
    regime: Regime,
    fraction: f64,
    seed: u64,
) -> Result<FinetuneRun> {
    match data {
        TaskData::Demo { users } => {
            train_classifier(model_cfg, pretrained, users, regime, fraction, &cfg.finetune, seed)
        }
        TaskData::Ctr { users, impressions } => train_ctr(
            model_cfg,
            pretrained,
            users,
            impressions,
            regime,
            fraction,
            &cfg.finetune,
            seed,
        ),
    }
}

pub fn record_of(
    cfg: &ExperimentConfig,
    task: Task,
    regime: Regime,
    fraction: f64,
    seed: u64,
    run: &FinetuneRun,
) -> RunRecord {
    RunRecord {
        task,
        regime,
        label_fraction: fraction,
        seed,
        split: "test".into(),
        metrics: run.report.metrics.clone(),
        n_examples: run.report.n_examples,
        n_train: run.n_train,
        config_hash: cfg.hash(),
        build_id: BUILD_ID.to_string(),
    }
}

fn run_stem(task: Task, regime: Regime, fraction: f64, seed: u64) -> String {
    format!("{task}-{regime}-f{fraction}-s{seed}")
}

/// A pre-trained checkpoint's user model, checked against the vocabulary.
pub fn load_pretrained(path: &Path, vocab: &Vocabulary) -> Result<(ModelConfig, ParamStore)> {
    let (meta, store) = load_checkpoint(path)?;
    if meta.kind != CheckpointKind::Pretrained {
        return Err(Error::Usage(format!(
            "{} is not a pre-trained checkpoint",
            path.display()
        )));
    }
    if meta.model.vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary has {} ids, data has {}",
            meta.model.vocab_size,
            vocab.len()
        )));
    }
    Ok((meta.model, store))
}

/// One selection of the finetune command. `None` fields expand to the
/// config's lists.
#[derive(Clone, Debug, Default)]
pub struct FinetuneRequest {
    pub task: Option<Task>,
    pub regime: Option<Regime>,
    pub fraction: Option<f64>,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
}

/// Runs the requested grid of downstream trainings. Each run appends a row
/// to `out/results.csv` and writes its metrics JSON and checkpoint.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    req: &FinetuneRequest,
    out: &Path,
) -> Result<Vec<RunRecord>> {
    if req.regime == Some(Regime::Scratch) && req.checkpoint.is_some() {
        return Err(Error::Usage("the scratch regime does not take a checkpoint".into()));
    }
    if let Some(r) = req.regime.filter(|r| r.needs_checkpoint()) {
        if req.checkpoint.is_none() {
            return Err(Error::Usage(format!("the {r} regime needs --checkpoint")));
        }
    }
    let tasks = req.task.map_or_else(|| cfg.tasks.clone(), |t| vec![t]);
    let mut regimes = req.regime.map_or_else(|| cfg.regimes.clone(), |r| vec![r]);
    if req.checkpoint.is_none() {
        regimes.retain(|r| !r.needs_checkpoint());
        if regimes.is_empty() {
            return Err(Error::Usage("frozen and finetune regimes need --checkpoint".into()));
        }
    }
    let fractions = req.fraction.map_or_else(|| cfg.label_fractions.clone(), |f| vec![f]);
    let seeds = req.seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
    for &f in &fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Usage(format!("--fraction must be in (0, 1], got {f}")));
        }
    }

    let vocab = load_vocab(data_dir)?;
    let pretrained = req
        .checkpoint
        .as_deref()
        .map(|p| load_pretrained(p, &vocab))
        .transpose()?;
    let model_cfg = match &pretrained {
        Some((m, _)) => m.clone(),
        None => cfg.model.with_vocab(vocab.len()),
    };
    create_dir(&out.join("metrics"))?;
    create_dir(&out.join("models"))?;
    write_config(cfg, out)?;
    let mut records = Vec::new();
    for &task in &tasks {
        let data = TaskData::load(data_dir, task, &vocab, cfg)?;
        for &regime in &regimes {
            let source = if regime.needs_checkpoint() {
                pretrained.as_ref().map(|(_, s)| s)
            } else {
                None
            };
            for &fraction in &fractions {
                for &seed in &seeds {
                    let run = finetune_once(cfg, &model_cfg, source, &data, regime, fraction, seed)?;
                    let rec = record_of(cfg, task, regime, fraction, seed, &run);
                    let stem = run_stem(task, regime, fraction, seed);
                    let mut json = serde_json::to_string_pretty(&rec)?;
                    json.push('\n');
                    write_atomic(&out.join("metrics").join(format!("{stem}.json")), json.as_bytes())?;
                    let meta = CheckpointMeta {
                        kind: CheckpointKind::Downstream,
                        model: model_cfg.clone(),
                        experiment: cfg.clone(),
                        config_hash: cfg.hash(),
                        build_id: BUILD_ID.to_string(),
                        downstream: Some(DownstreamMeta {
                            task,
                            regime,
                            label_fraction: fraction,
                            seed,
                            n_classes: match run.downstream.head {
                                crate::finetune::Head::Class(ref h) => Some(h.n_classes()),
                                crate::finetune::Head::Ctr(_) => None,
                            },
                            n_train: run.n_train,
                        }),
                    };
                    save_checkpoint(
                        &out.join("models").join(format!("{stem}.ckpt")),
                        &meta,
                        &run.downstream.store,
                    )?;
                    append_record(&out.join(RESULTS_FILE), &rec)?;
                    log::info!("{}", rec.csv_row());
                    records.push(rec);
                }
            }
        }
    }
    Ok(records)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    fn pick(self, s: Split) -> Vec<usize> {
        match self {
            EvalSplit::Train => s.train,
            EvalSplit::Val => s.val,
            EvalSplit::Test => s.test,
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        })
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            _ => Err(Error::Usage(format!(
                "unknown split {s:?} (expected train, val or test)"
            ))),
        }
    }
}

/// Scores a fine-tuned checkpoint on one split of its task without training
/// and appends the row to `out/results.csv`. The whole train split is used,
/// not the label-fraction subsample.
pub fn run_evaluate(
    data_dir: &Path,
    checkpoint: &Path,
    task: Option<Task>,
    split: EvalSplit,
    out: &Path,
) -> Result<RunRecord> {
    let (meta, params) = load_checkpoint(checkpoint)?;
    let spec = meta.spec()?;
    let d = meta.downstream.clone().expect("spec checked downstream");
    if let Some(t) = task.filter(|&t| t != d.task) {
        return Err(Error::Usage(format!("checkpoint was trained for {}, not {t}", d.task)));
    }
    let cfg = &meta.experiment;
    let vocab = load_vocab(data_dir)?;
    if vocab.len() != meta.model.vocab_size {
        return Err(Error::Checkpoint(
            "checkpoint vocabulary does not match the data".into(),
        ));
    }
    let ds = Downstream::restore(&meta.model, spec, &params)?;
    let batch = cfg.finetune.eval_batch_size;
    let report = match TaskData::load(data_dir, d.task, &vocab, cfg)? {
        TaskData::Demo { users } => {
            let (labels, _) = class_labels(&users, &cfg.finetune.label_key)?;
            let idx = split.pick(demo_split(&labels, d.seed));
            evaluate_classifier(&ds, &users, &labels, &idx, batch)?
        }
        TaskData::Ctr { users, impressions } => {
            let owner = impression_owners(&users, &impressions)?;
            let idx = split.pick(ctr_split(users.len(), &owner, d.seed));
            evaluate_ctr(&ds, &users, &impressions, &owner, &idx, batch)?
        }
    };
    let rec = RunRecord {
        task: d.task,
        regime: d.regime,
        label_fraction: d.label_fraction,
        seed: d.seed,
        split: split.to_string(),
        metrics: report.metrics,
        n_examples: report.n_examples,
        n_train: d.n_train,
        config_hash: meta.config_hash.clone(),
        build_id: BUILD_ID.to_string(),
    };
    create_dir(out)?;
    append_record(&out.join(RESULTS_FILE), &rec)?;
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    K,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::K => "k",
        }
    }

    /// `cfg` with the pre-training value on this axis set to `v`.
    pub fn apply(self, cfg: &ExperimentConfig, v: f64) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        match self {
            SweepAxis::Lambda => c.pretrain.lambda = v,
            SweepAxis::K => {
                if v.fract() != 0.0 || v < 1.0 {
                    return Err(Error::Usage(format!("K values must be positive integers, got {v}")));
                }
                c.pretrain.next_k = v as usize;
            }
        }
        c.validate().map_err(|e| Error::Usage(e.to_string()))?;
        Ok(c)
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "k" | "K" => Ok(SweepAxis::K),
            _ => Err(Error::Usage(format!("unknown sweep axis {s:?} (expected lambda or K)"))),
        }
    }
}

/// Seed-averaged metrics of one (value, regime) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub regime: Regime,
    pub config_hash: String,
    /// Users too short for NBP at this K.
    pub nbp_skipped_users: usize,
    pub n_seeds: usize,
    /// Keys `<task>_<metric>`.
    pub metrics: BTreeMap<String, f64>,
}

pub const SWEEP_METRICS: [&str; 4] = ["demo_accuracy", "demo_macro_f", "ctr_auc", "ctr_ap"];

impl SweepRow {
    pub fn csv_header() -> String {
        let mut cols = vec!["axis", "value", "regime", "config_hash", "nbp_skipped_users", "n_seeds"];
        cols.extend(SWEEP_METRICS);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.axis.to_string(),
            format!("{:?}", self.value),
            self.regime.to_string(),
            self.config_hash.clone(),
            self.nbp_skipped_users.to_string(),
            self.n_seeds.to_string(),
        ];
        for m in SWEEP_METRICS {
            cols.push(self.metrics.get(m).map_or(String::new(), |v| format!("{v:?}")));
        }
        cols.join(",")
    }
}

/// For each value: pre-trains with the value applied, then fine-tunes in the
/// frozen and finetune regimes for every configured task and seed at
/// `sweep_fraction`. Rows go to `out/sweep_<axis>.csv`; per-run rows to
/// `out/results.csv`.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data_dir: &Path,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let configs = values.iter().map(|&v| axis.apply(cfg, v)).collect::<Result<Vec<_>>>()?;
    let vocab = load_vocab(data_dir)?;
    let corpus = Corpus::new(load_users(data_dir, PRETRAIN_FILE, &vocab, cfg)?);
    let task_data = cfg
        .tasks
        .iter()
        .map(|&t| TaskData::load(data_dir, t, &vocab, cfg))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let table = out.join(format!("sweep_{}.csv", axis.as_str()));
    let mut rows = Vec::new();
    for (c, &value) in configs.iter().zip(values) {
        let (model_cfg, store, report) = pretrain_model(c, vocab.len(), &corpus)?;
        if report.nbp_skipped_users > 0 {
            log::warn!(
                "{}={value}: {} users too short for NBP were skipped",
                axis.as_str(),
                report.nbp_skipped_users
            );
        }
        for regime in [Regime::Frozen, Regime::Finetune] {
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            for data in &task_data {
                for &seed in &c.seeds {
                    let run = finetune_once(c, &model_cfg, Some(&store), data, regime, c.sweep_fraction, seed)?;
                    let rec = record_of(c, data.task(), regime, c.sweep_fraction, seed, &run);
                    append_record(&out.join(RESULTS_FILE), &rec)?;
                    for (k, v) in &rec.metrics {
                        *sums.entry(format!("{}_{k}", data.task())).or_default() += v;
                    }
                }
            }
            let n = c.seeds.len();
            let row = SweepRow {
                axis: axis.as_str(),
                value,
                regime,
                config_hash: c.hash(),
                nbp_skipped_users: report.nbp_skipped_users,
                n_seeds: n,
                metrics: sums.into_iter().map(|(k, v)| (k, v / n as f64)).collect(),
            };
            append_csv_row(&table, &SweepRow::csv_header(), &row.csv_row())?;
            rows.push(row);
        }
    }
    Ok(rows)
}
