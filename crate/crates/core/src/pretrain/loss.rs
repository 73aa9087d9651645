use std::collections::HashMap;

use super::sampling::{BehaviorRef, Corpus, MbpSample, NbpSample};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{MaskMode, Slot, TokenBatch, UserLayout, UserModel};

/// Dot-product relevance of each candidate to its user.
///
/// `users: [B, d]`, `candidates: [B, C, d]` → `[B, C]`.
pub fn predict_scores(tape: &mut Tape, users: Var, candidates: Var) -> Result<Var> {
    let (su, sc) = (tape.shape(users).to_vec(), tape.shape(candidates).to_vec());
    if su.len() != 2 || sc.len() != 3 || su[0] != sc[0] || su[1] != sc[2] {
        return Err(Error::shape(
            "predict_scores",
            format!("users {su:?} vs candidates {sc:?}"),
        ));
    }
    let (b, c, d) = (sc[0], sc[1], sc[2]);
    let u = tape.reshape(users, &[b, d, 1])?;
    let s = tape.batch_matmul(candidates, u, false)?;
    tape.reshape(s, &[b, c])
}

/// Unique behaviors referenced by a batch, encoded once.
struct BehaviorRows {
    rows: HashMap<BehaviorRef, usize>,
    refs: Vec<BehaviorRef>,
}

impl BehaviorRows {
    fn new() -> Self {
        BehaviorRows {
            rows: HashMap::new(),
            refs: Vec::new(),
        }
    }

    fn row(&mut self, r: BehaviorRef) -> usize {
        *self.rows.entry(r).or_insert_with(|| {
            self.refs.push(r);
            self.refs.len() - 1
        })
    }
}

/// Loss nodes of one forward pass. A task's node is absent when the batch had
/// no samples for it.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mbp: Option<Var>,
    pub nbp: Option<Var>,
}

/// Which objectives contribute to the total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub mbp: bool,
    pub nbp: bool,
    pub lambda: f64,
}

fn candidate_scores(tape: &mut Tape, beh: Var, users: Var, sets: &[Vec<usize>]) -> Result<Var> {
    let c = sets[0].len();
    let d = tape.shape(beh)[1];
    let idx: Vec<usize> = sets.iter().flatten().copied().collect();
    let cands = tape.gather_rows(beh, &idx)?;
    let cands = tape.reshape(cands, &[sets.len(), c, d])?;
    predict_scores(tape, users, cands)
}

/// Builds the joint forward pass `L = L_MBP + λ·L_NBP` for a batch.
pub fn forward_losses(
    tape: &mut Tape,
    model: &UserModel,
    corpus: &Corpus,
    mbp: &[MbpSample],
    nbp: &[NbpSample],
    objective: Objective,
) -> Result<LossVars> {
    let mbp = if objective.mbp { mbp } else { &[] };
    let nbp = if objective.nbp { nbp } else { &[] };
    if mbp.is_empty() && nbp.is_empty() {
        return Err(Error::Contract("empty pre-training batch".into()));
    }
    let mut rows = BehaviorRows::new();

    let mut mbp_seqs = Vec::with_capacity(mbp.len());
    let mut mbp_sets = Vec::with_capacity(mbp.len());
    for s in mbp {
        let rec = &corpus.users[s.user];
        let seq: Vec<(Slot, usize)> = rec
            .behaviors
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let slot = if i != s.masked_index {
                    Slot::Behavior(rows.row(BehaviorRef { user: s.user, index: i }))
                } else {
                    match model.config.mask_mode {
                        MaskMode::Replace => Slot::Mask,
                        MaskMode::Remove => Slot::Pad,
                    }
                };
                (slot, b.position)
            })
            .collect();
        mbp_seqs.push(seq);
        mbp_sets.push(s.candidates.iter().map(|&c| rows.row(c)).collect::<Vec<_>>());
    }

    let mut nbp_seqs = Vec::with_capacity(nbp.len());
    let mut nbp_sets = Vec::new();
    let mut nbp_owner = Vec::new();
    for (j, s) in nbp.iter().enumerate() {
        let rec = &corpus.users[s.user];
        let seq: Vec<(Slot, usize)> = rec.behaviors[..s.n_inputs]
            .iter()
            .enumerate()
            .map(|(i, b)| {
                (
                    Slot::Behavior(rows.row(BehaviorRef { user: s.user, index: i })),
                    b.position,
                )
            })
            .collect();
        nbp_seqs.push(seq);
        for set in &s.candidates {
            nbp_sets.push(set.iter().map(|&c| rows.row(c)).collect::<Vec<_>>());
            nbp_owner.push(j);
        }
    }

    let titles: Vec<&[u32]> = rows.refs.iter().map(|&r| corpus.tokens(r)).collect();
    let beh = model.encode_behaviors(tape, &TokenBatch::new(&titles)?)?;

    let mbp_loss = if mbp.is_empty() {
        None
    } else {
        let u = model.encode_users(tape, beh, &UserLayout::new(&mbp_seqs)?)?;
        let scores = candidate_scores(tape, beh, u, &mbp_sets)?;
        let gold: Vec<usize> = mbp.iter().map(|s| s.gold_index).collect();
        Some(tape.cross_entropy(scores, &gold)?)
    };

    let nbp_loss = if nbp.is_empty() {
        None
    } else {
        let u = model.encode_users(tape, beh, &UserLayout::new(&nbp_seqs)?)?;
        let u = tape.gather_rows(u, &nbp_owner)?;
        let scores = candidate_scores(tape, beh, u, &nbp_sets)?;
        let gold: Vec<usize> = nbp.iter().flat_map(|s| s.gold_indices.iter().copied()).collect();
        // mean over B*K rows == mean over samples of (1/K)·Σ_k CE_k
        Some(tape.cross_entropy(scores, &gold)?)
    };

    let total = match (mbp_loss, nbp_loss) {
        (Some(m), Some(n)) => {
            let w = tape.scale(n, objective.lambda);
            tape.add(m, w)?
        }
        (Some(m), None) => m,
        (None, Some(n)) => tape.scale(n, objective.lambda),
        (None, None) => unreachable!(),
    };
    Ok(LossVars {
        total,
        mbp: mbp_loss,
        nbp: nbp_loss,
    })
}

/// Single-user NBP encoding: the user embedding from the first `n_inputs`
/// behaviors only.
pub fn nbp_user_embedding(tape: &mut Tape, model: &UserModel, corpus: &Corpus, s: &NbpSample) -> Result<Var> {
    let rec = &corpus.users[s.user];
    let titles: Vec<&[u32]> = rec.behaviors[..s.n_inputs]
        .iter()
        .map(|b| b.tokens.as_slice())
        .collect();
    let beh = model.encode_behaviors(tape, &TokenBatch::new(&titles)?)?;
    let seq: Vec<(Slot, usize)> = rec.behaviors[..s.n_inputs]
        .iter()
        .enumerate()
        .map(|(i, b)| (Slot::Behavior(i), b.position))
        .collect();
    model.encode_users(tape, beh, &UserLayout::new(&[seq])?)
}
