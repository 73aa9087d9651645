use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::heads::{ClassificationHead, CtrHead};
use super::split::{random_split, stratified_split, stratified_subsample, subsample, Split};
use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use crate::data::{Impression, UserRecord};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, classification_report, ranking_report, roc_auc, MetricsReport};
use crate::model::{ModelConfig, TokenBatch, UserModel};
use crate::pretrain::{sample_rng, Stream};

/// Prefix of the user model inside every parameter store.
pub const USER_PREFIX: &str = "user";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Randomly initialized user model, trained end to end.
    Scratch,
    /// Pre-trained user model held fixed.
    Frozen,
    /// Pre-trained user model updated with the head.
    Finetune,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Scratch, Regime::Frozen, Regime::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::Frozen => "frozen",
            Regime::Finetune => "finetune",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        self != Regime::Scratch
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown regime {s:?} (expected scratch, frozen or finetune)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// User classification from behaviors.
    Demo,
    /// Click prediction for (user, ad) pairs.
    Ctr,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Demo => "demo",
            Task::Ctr => "ctr",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "demo" => Ok(Task::Demo),
            "ctr" => Ok(Task::Ctr),
            _ => Err(Error::Usage(format!("unknown task {s:?} (expected demo or ctr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Label key read from each user's label map.
    pub label_key: String,
    pub eval_batch_size: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            label_key: crate::data::GROUP_LABEL.to_string(),
            eval_batch_size: 256,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("finetune epochs and batch sizes must be >= 1".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config("finetune.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Class(ClassificationHead),
    Ctr(CtrHead),
}

/// User model plus a task head in one parameter store.
#[derive(Clone, Debug)]
pub struct Downstream {
    pub store: ParamStore,
    pub model: UserModel,
    pub head: Head,
    pub regime: Regime,
}

/// What a downstream head is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSpec {
    Class(usize),
    Ctr,
}

/// Deterministic RNG for one purpose (`tag`) of a downstream run.
pub fn task_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    sample_rng(seed, tag, 0, Stream::Order)
}

impl Downstream {
    /// Builds the model for `regime`. Frozen and finetune copy the user model
    /// from `pretrained`; scratch must not be given one.
    pub fn build(
        model_cfg: &ModelConfig,
        spec: HeadSpec,
        regime: Regime,
        pretrained: Option<&ParamStore>,
        seed: u64,
    ) -> Result<Self> {
        match (regime.needs_checkpoint(), pretrained.is_some()) {
            (false, true) => return Err(Error::Usage("the scratch regime does not take a checkpoint".into())),
            (true, false) => {
                return Err(Error::Usage(format!(
                    "the {regime} regime needs a pre-trained checkpoint"
                )))
            }
            _ => {}
        }
        let mut rng = task_rng(seed, "init");
        let mut store = ParamStore::new();
        let model = UserModel::new(&mut store, USER_PREFIX, model_cfg, &mut rng)?;
        if let Some(src) = pretrained {
            let expected = model.param_ids(&store).count();
            let copied = store.load_matching(src);
            if copied != expected {
                return Err(Error::Checkpoint(format!(
                    "checkpoint provides {copied} of {expected} user-model parameters; model configs differ"
                )));
            }
        }
        let head = match spec {
            HeadSpec::Class(c) => Head::Class(ClassificationHead::new(&mut store, model.dim(), c, &mut rng)?),
            HeadSpec::Ctr => Head::Ctr(CtrHead::new(&mut store, &model, &mut rng)?),
        };
        if regime == Regime::Frozen {
            model.set_trainable(&mut store, false);
        }
        Ok(Downstream {
            store,
            model,
            head,
            regime,
        })
    }

    /// Rebuilds the architecture and loads every parameter from `params`.
    pub fn restore(model_cfg: &ModelConfig, spec: HeadSpec, params: &ParamStore) -> Result<Self> {
        let mut ds = Downstream::build(model_cfg, spec, Regime::Scratch, None, 0)?;
        let copied = ds.store.load_matching(params);
        if copied != ds.store.len() || params.len() != ds.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, {copied} of {} expected ones match",
                params.len(),
                ds.store.len()
            )));
        }
        Ok(ds)
    }

    fn class_head(&self) -> Result<&ClassificationHead> {
        match &self.head {
            Head::Class(h) => Ok(h),
            Head::Ctr(_) => Err(Error::Usage("model has a CTR head, not a classification head".into())),
        }
    }

    fn ctr_head(&self) -> Result<&CtrHead> {
        match &self.head {
            Head::Ctr(h) => Ok(h),
            Head::Class(_) => Err(Error::Usage("model has a classification head, not a CTR head".into())),
        }
    }

    /// `[len(idx), d]` user embeddings, no gradient.
    pub fn embed_users(&self, users: &[UserRecord], idx: &[usize], batch: usize) -> Result<Tensor> {
        let d = self.model.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for chunk in idx.chunks(batch.max(1)) {
            let recs: Vec<&UserRecord> = chunk.iter().map(|&i| &users[i]).collect();
            let mut tape = Tape::new(&self.store);
            let u = self.model.encode_records(&mut tape, &recs)?;
            data.extend_from_slice(tape.value(u));
        }
        Tensor::new(vec![idx.len(), d], data)
    }

    /// Argmax class for each user in `idx`.
    pub fn predict_classes(&self, users: &[UserRecord], idx: &[usize], batch: usize) -> Result<Vec<usize>> {
        let head = self.class_head()?;
        let emb = self.embed_users(users, idx, batch)?;
        let mut tape = Tape::new(&self.store);
        let u = tape.constant(emb);
        let z = head.logits(&mut tape, u)?;
        let c = head.n_classes();
        Ok(tape
            .value(z)
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for k in 1..c {
                    if row[k] > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect())
    }

    /// Click logits for impressions `idx`. `owner[i]` indexes `users`.
    pub fn ctr_scores(
        &self,
        users: &[UserRecord],
        imps: &[Impression],
        owner: &[usize],
        idx: &[usize],
        batch: usize,
    ) -> Result<Vec<f64>> {
        let head = self.ctr_head()?;
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(batch.max(1)) {
            let (uniq, rows) = unique_owners(owner, chunk);
            let emb = self.embed_users(users, &uniq, batch)?;
            let mut tape = Tape::new(&self.store);
            let u = tape.constant(emb);
            let u = tape.gather_rows(u, &rows)?;
            let ads: Vec<&[u32]> = chunk.iter().map(|&i| imps[i].ad_tokens.as_slice()).collect();
            let z = head.logits(&mut tape, u, &TokenBatch::new(&ads)?)?;
            out.extend_from_slice(tape.value(z));
        }
        Ok(out)
    }
}

/// Distinct owners of `chunk` in first-seen order, and each item's row.
fn unique_owners(owner: &[usize], chunk: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut seen = HashMap::new();
    let mut uniq = Vec::new();
    let rows = chunk
        .iter()
        .map(|&i| {
            *seen.entry(owner[i]).or_insert_with(|| {
                uniq.push(owner[i]);
                uniq.len() - 1
            })
        })
        .collect();
    (uniq, rows)
}

/// Class index of every user under `key`, and the class count.
pub fn class_labels(users: &[UserRecord], key: &str) -> Result<(Vec<usize>, usize)> {
    let labels = users
        .iter()
        .map(|u| {
            u.labels
                .get(key)
                .copied()
                .ok_or_else(|| Error::Data(format!("user {} has no {key:?} label", u.user_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok((labels, n_classes))
}

/// The 80/10/10 user split for classification under `seed`.
pub fn demo_split(labels: &[usize], seed: u64) -> Split {
    stratified_split(labels, &mut task_rng(seed, "split"))
}

/// Owner index of each impression.
pub fn impression_owners(users: &[UserRecord], imps: &[Impression]) -> Result<Vec<usize>> {
    let by_id: HashMap<&str, usize> = users.iter().enumerate().map(|(i, u)| (u.user_id.as_str(), i)).collect();
    imps.iter()
        .map(|imp| {
            by_id
                .get(imp.user_id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("impression for unknown user {}", imp.user_id)))
        })
        .collect()
}

/// Impression split that keeps each user's impressions in one part.
pub fn ctr_split(n_users: usize, owner: &[usize], seed: u64) -> Split {
    let users = random_split(n_users, &mut task_rng(seed, "split"));
    let mut part = vec![0u8; n_users];
    for &u in &users.val {
        part[u] = 1;
    }
    for &u in &users.test {
        part[u] = 2;
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, &u) in owner.iter().enumerate() {
        match part[u] {
            0 => split.train.push(i),
            1 => split.val.push(i),
            _ => split.test.push(i),
        }
    }
    split
}

/// A trained downstream model and its held-out test metrics.
#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub downstream: Downstream,
    pub report: MetricsReport,
    /// Validation metric of the selected epoch (accuracy or AUC).
    pub val_metric: f64,
    pub best_epoch: usize,
    pub n_train: usize,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "label fraction must be in (0, 1], got {fraction}"
        )));
    }
    Ok(())
}

/// User embeddings for a training batch: cached rows when the user model is
/// frozen, otherwise a differentiable encoding.
fn batch_users(
    tape: &mut Tape,
    model: &UserModel,
    users: &[UserRecord],
    idx: &[usize],
    cache: Option<&Tensor>,
) -> Result<Var> {
    match cache {
        Some(all) => {
            let d = all.shape()[1];
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(all.row(i));
            }
            Ok(tape.constant(Tensor::new(vec![idx.len(), d], data)?))
        }
        None => {
            let recs: Vec<&UserRecord> = idx.iter().map(|&i| &users[i]).collect();
            model.encode_records(tape, &recs)
        }
    }
}

fn adam_step(store: &mut ParamStore, adam: &mut Adam, loss: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    store.zero_grad();
    let (value, grads) = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape)?;
        (tape.scalar(l), tape.backward(l)?)
    };
    grads.accumulate_into(store);
    adam.step(store);
    Ok(value)
}

/// Trains a classification head on the users in `users` with labels under
/// `cfg.label_key`; the model from the best validation epoch is kept.
pub fn train_classifier(
    model_cfg: &ModelConfig,
    pretrained: Option<&ParamStore>,
    users: &[UserRecord],
    regime: Regime,
    fraction: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    check_fraction(fraction)?;
    let (labels, n_classes) = class_labels(users, &cfg.label_key)?;
    let split = demo_split(&labels, seed);
    let train = stratified_subsample(&split.train, &labels, fraction, &mut task_rng(seed, "subsample"));
    if train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!(
            "too few labeled users: {} train, {} val, {} test",
            train.len(),
            split.val.len(),
            split.test.len()
        )));
    }
    for c in 0..n_classes {
        if !train.iter().any(|&i| labels[i] == c) {
            log::warn!("class {c} is absent from the training split");
        }
    }
    let mut ds = Downstream::build(model_cfg, HeadSpec::Class(n_classes), regime, pretrained, seed)?;
    let head = ds.class_head()?.clone();
    let model = ds.model.clone();
    let cache = if regime == Regime::Frozen {
        let all: Vec<usize> = (0..users.len()).collect();
        Some(ds.embed_users(users, &all, cfg.eval_batch_size)?)
    } else {
        None
    };
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order_rng = task_rng(seed, "order");
    let mut order = train.clone();
    let val_gold: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let gold: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            adam_step(&mut ds.store, &mut adam, |tape| {
                let u = batch_users(tape, &model, users, chunk, cache.as_ref())?;
                let z = head.logits(tape, u)?;
                tape.cross_entropy(z, &gold)
            })?;
        }
        let preds = ds.predict_classes(users, &split.val, cfg.eval_batch_size)?;
        let acc = accuracy(&preds, &val_gold)?;
        log::debug!("{regime} epoch {epoch}: val accuracy {acc:.4}");
        if best.as_ref().is_none_or(|b| acc > b.0) {
            best = Some((acc, epoch, ds.store.clone()));
        }
    }
    let (val_metric, best_epoch, store) = best.expect("at least one epoch");
    ds.store = store;
    let preds = ds.predict_classes(users, &split.test, cfg.eval_batch_size)?;
    let gold: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    let report = classification_report(&preds, &gold, n_classes)?;
    Ok(FinetuneRun {
        downstream: ds,
        report,
        val_metric,
        best_epoch,
        n_train: train.len(),
    })
}

/// Trains the CTR head on `imps`, whose users are looked up in `users`.
#[allow(clippy::too_many_arguments)]
pub fn train_ctr(
    model_cfg: &ModelConfig,
    pretrained: Option<&ParamStore>,
    users: &[UserRecord],
    imps: &[Impression],
    regime: Regime,
    fraction: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    check_fraction(fraction)?;
    let owner = impression_owners(users, imps)?;
    let split = ctr_split(users.len(), &owner, seed);
    let train = subsample(&split.train, fraction, &mut task_rng(seed, "subsample"));
    if train.is_empty() || split.val.is_empty() || split.test.is_empty() {
        return Err(Error::Data(format!(
            "too few impressions: {} train, {} val, {} test",
            train.len(),
            split.val.len(),
            split.test.len()
        )));
    }
    let mut ds = Downstream::build(model_cfg, HeadSpec::Ctr, regime, pretrained, seed)?;
    let head = ds.ctr_head()?.clone();
    let model = ds.model.clone();
    let cache = if regime == Regime::Frozen {
        let all: Vec<usize> = (0..users.len()).collect();
        Some(ds.embed_users(users, &all, cfg.eval_batch_size)?)
    } else {
        None
    };
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order_rng = task_rng(seed, "order");
    let mut order = train.clone();
    let val_labels: Vec<bool> = split.val.iter().map(|&i| imps[i].click).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let y: Vec<f64> = chunk.iter().map(|&i| if imps[i].click { 1.0 } else { 0.0 }).collect();
            let ads: Vec<&[u32]> = chunk.iter().map(|&i| imps[i].ad_tokens.as_slice()).collect();
            let ads = TokenBatch::new(&ads)?;
            let (uniq, rows) = unique_owners(&owner, chunk);
            adam_step(&mut ds.store, &mut adam, |tape| {
                let u = batch_users(tape, &model, users, &uniq, cache.as_ref())?;
                let u = tape.gather_rows(u, &rows)?;
                let z = head.logits(tape, u, &ads)?;
                tape.bce_with_logits(z, &y)
            })?;
        }
        let scores = ds.ctr_scores(users, imps, &owner, &split.val, cfg.eval_batch_size)?;
        let auc = roc_auc(&scores, &val_labels)?;
        log::debug!("{regime} epoch {epoch}: val AUC {auc:.4}");
        if best.as_ref().is_none_or(|b| auc > b.0) {
            best = Some((auc, epoch, ds.store.clone()));
        }
    }
    let (val_metric, best_epoch, store) = best.expect("at least one epoch");
    ds.store = store;
    let report = evaluate_ctr(&ds, users, imps, &owner, &split.test, cfg.eval_batch_size)?;
    Ok(FinetuneRun {
        downstream: ds,
        report,
        val_metric,
        best_epoch,
        n_train: train.len(),
    })
}

pub fn evaluate_classifier(
    ds: &Downstream,
    users: &[UserRecord],
    labels: &[usize],
    idx: &[usize],
    batch: usize,
) -> Result<MetricsReport> {
    let preds = ds.predict_classes(users, idx, batch)?;
    let gold: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    classification_report(&preds, &gold, ds.class_head()?.n_classes())
}

/// AUC and AP over impressions `idx`; errors if they hold a single class.
pub fn evaluate_ctr(
    ds: &Downstream,
    users: &[UserRecord],
    imps: &[Impression],
    owner: &[usize],
    idx: &[usize],
    batch: usize,
) -> Result<MetricsReport> {
    let scores = ds.ctr_scores(users, imps, owner, idx, batch)?;
    let labels: Vec<bool> = idx.iter().map(|&i| imps[i].click).collect();
    ranking_report(&scores, &labels)
}
