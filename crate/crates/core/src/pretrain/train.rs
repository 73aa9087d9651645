use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{forward_losses, Objective};
use super::sampling::{make_mbp_sample, make_nbp_sample, sample_rng, Corpus, MbpSample, NbpSample, Stream};
use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::model::UserModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Negatives per candidate set (P).
    pub negatives: usize,
    /// Future behaviors predicted by NBP (K).
    pub next_k: usize,
    /// Weight of the NBP loss (λ).
    pub lambda: f64,
    pub use_mbp: bool,
    pub use_nbp: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            negatives: 4,
            next_k: 2,
            lambda: 1.0,
            use_mbp: true,
            use_nbp: true,
            batch_size: 64,
            epochs: 2,
            lr: 1e-4,
            seed: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.negatives == 0 || self.next_k == 0 {
            return Err(Error::Config(
                "pretrain.negatives and pretrain.next_k must be >= 1".into(),
            ));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(
                "pretrain.lambda must be a finite non-negative number".into(),
            ));
        }
        if !self.use_mbp && !self.use_nbp {
            return Err(Error::Config("at least one of use_mbp/use_nbp must be set".into()));
        }
        if self.batch_size == 0 || self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(
                "pretrain.batch_size and pretrain.lr must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        Objective {
            mbp: self.use_mbp,
            nbp: self.use_nbp,
            lambda: self.lambda,
        }
    }
}

/// One optimizer step. Task losses are NaN when the batch had no sample for
/// that task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_mbp: f64,
    pub loss_nbp: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PretrainReport {
    pub rows: Vec<LossRow>,
    /// Users with fewer than two behaviors (excluded entirely).
    pub skipped_users: usize,
    /// Users too short for NBP at the configured K (MBP only).
    pub nbp_skipped_users: usize,
}

impl PretrainReport {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.rows.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let rows: Vec<_> = self.rows.iter().filter(|r| r.epoch == e).collect();
                rows.iter().map(|r| r.loss_total).sum::<f64>() / rows.len() as f64
            })
            .collect()
    }
}

pub fn write_loss_csv<W: Write>(mut w: W, rows: &[LossRow]) -> std::io::Result<()> {
    writeln!(w, "epoch,step,loss_total,loss_mbp,loss_nbp")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:?},{:?},{:?}",
            r.epoch, r.step, r.loss_total, r.loss_mbp, r.loss_nbp
        )?;
    }
    Ok(())
}

/// Samples for `users` in `epoch`. Each user's draws come from its own
/// seeded stream, so the result does not depend on thread count.
pub fn build_samples(
    corpus: &Corpus,
    users: &[usize],
    cfg: &PretrainConfig,
    epoch: usize,
) -> Result<(Vec<MbpSample>, Vec<NbpSample>)> {
    let per_user: Vec<Result<(Option<MbpSample>, Option<NbpSample>)>> = users
        .par_iter()
        .map(|&u| {
            let id = &corpus.users[u].user_id;
            let mbp = if cfg.use_mbp {
                let mut rng = sample_rng(cfg.seed, id, epoch, Stream::Mbp);
                make_mbp_sample(corpus, u, cfg.negatives, &mut rng)?
            } else {
                None
            };
            let nbp = if cfg.use_nbp {
                let mut rng = sample_rng(cfg.seed, id, epoch, Stream::Nbp);
                make_nbp_sample(corpus, u, None, cfg.next_k, cfg.negatives, &mut rng)?
            } else {
                None
            };
            Ok((mbp, nbp))
        })
        .collect();
    let mut mbp = Vec::new();
    let mut nbp = Vec::new();
    for r in per_user {
        let (m, n) = r?;
        mbp.extend(m);
        nbp.extend(n);
    }
    Ok((mbp, nbp))
}

/// Thread pool for sample construction, capped by `PTUM_NUM_THREADS`.
fn sampling_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("PTUM_NUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("PTUM_NUM_THREADS must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Loss values of one forward pass over `users` (no update).
pub fn evaluate_losses(
    model: &UserModel,
    store: &ParamStore,
    corpus: &Corpus,
    users: &[usize],
    cfg: &PretrainConfig,
    epoch: usize,
) -> Result<LossRow> {
    let (mbp, nbp) = build_samples(corpus, users, cfg, epoch)?;
    let mut tape = Tape::new(store);
    let l = forward_losses(&mut tape, model, corpus, &mbp, &nbp, cfg.objective())?;
    Ok(LossRow {
        epoch,
        step: 0,
        loss_total: tape.scalar(l.total),
        loss_mbp: l.mbp.map_or(f64::NAN, |v| tape.scalar(v)),
        loss_nbp: l.nbp.map_or(f64::NAN, |v| tape.scalar(v)),
    })
}

/// Runs joint MBP + NBP pre-training, one Adam step per batch.
pub fn pretrain(
    model: &UserModel,
    store: &mut ParamStore,
    corpus: &Corpus,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..corpus.len())
        .filter(|&u| corpus.users[u].behaviors.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::Data("no user has the two behaviors pre-training needs".into()));
    }
    let mut report = PretrainReport {
        skipped_users: corpus.len() - usable.len(),
        nbp_skipped_users: usable
            .iter()
            .filter(|&&u| corpus.users[u].behaviors.len() < cfg.next_k + 1)
            .count(),
        ..Default::default()
    };
    if report.skipped_users > 0 {
        log::warn!("skipping {} users with fewer than 2 behaviors", report.skipped_users);
    }
    if cfg.use_nbp && report.nbp_skipped_users > 0 {
        log::info!(
            "{} users are too short for NBP with K={} and contribute MBP only",
            report.nbp_skipped_users,
            cfg.next_k
        );
    }
    let pool = sampling_pool()?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut sample_rng(cfg.seed, "", epoch, Stream::Order));
        for chunk in order.chunks(cfg.batch_size) {
            let (mbp, nbp) = pool.install(|| build_samples(corpus, chunk, cfg, epoch))?;
            if (mbp.is_empty() || !cfg.use_mbp) && (nbp.is_empty() || !cfg.use_nbp) {
                continue;
            }
            store.zero_grad();
            let (row, grads) = {
                let mut tape = Tape::new(store);
                let l = forward_losses(&mut tape, model, corpus, &mbp, &nbp, cfg.objective())?;
                let row = LossRow {
                    epoch,
                    step,
                    loss_total: tape.scalar(l.total),
                    loss_mbp: l.mbp.map_or(f64::NAN, |v| tape.scalar(v)),
                    loss_nbp: l.nbp.map_or(f64::NAN, |v| tape.scalar(v)),
                };
                (row, tape.backward(l.total)?)
            };
            grads.accumulate_into(store);
            adam.step(store);
            report.rows.push(row);
            step += 1;
        }
        log::info!(
            "epoch {epoch}: mean loss {:.5}",
            report.epoch_means().last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(report)
}
