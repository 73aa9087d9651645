//! Measurements shared by the property tests and the acceptance report.

use std::path::Path;

use ptum::autodiff::{ParamStore, Tape};
use ptum::data::UserRecord;
use ptum::metrics::{average_precision, roc_auc};
use ptum::model::{MaskMode, UserModel};
use ptum::pretrain::{
    build_samples, forward_losses, make_mbp_sample, make_nbp_sample, nbp_user_embedding, Corpus, Objective,
};
use ptum::runner::{gen_data, load_users, load_vocab, ExperimentConfig, PRETRAIN_FILE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metric_oracle::{ap_oracle, auc_oracle};
use super::oracle::Oracle;
use super::{random_corpus, tiny_config, tiny_model, zero_all, VARIANTS};

const VOCAB: usize = 12;

fn mode(i: usize) -> MaskMode {
    if i.is_multiple_of(2) {
        MaskMode::Replace
    } else {
        MaskMode::Remove
    }
}

fn losses(
    store: &ParamStore,
    model: &UserModel,
    corpus: &Corpus,
    p: usize,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, f64, f64) {
    let users: Vec<usize> = (0..corpus.len()).collect();
    let mbp: Vec<_> = users
        .iter()
        .filter_map(|&u| make_mbp_sample(corpus, u, p, rng).unwrap())
        .collect();
    let nbp: Vec<_> = users
        .iter()
        .filter_map(|&u| make_nbp_sample(corpus, u, None, 2, p, rng).unwrap())
        .collect();
    let mut tape = Tape::new(store);
    let obj = Objective {
        mbp: true,
        nbp: true,
        lambda,
    };
    let l = forward_losses(&mut tape, model, corpus, &mbp, &nbp, obj).unwrap();
    (
        tape.scalar(l.total),
        tape.scalar(l.mbp.unwrap()),
        tape.scalar(l.nbp.unwrap()),
    )
}

#[derive(Debug)]
pub struct LossAnalytics {
    /// max |L - ln(P+1)| over zeroed models, P ∈ {1, 4, 9}.
    pub zero_dev: f64,
    pub lambda0_dev: f64,
    pub lambda1_dev: f64,
}

pub fn loss_analytics() -> LossAnalytics {
    let mut out = LossAnalytics {
        zero_dev: 0.0,
        lambda0_dev: 0.0,
        lambda1_dev: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..18 {
        let cfg = tiny_config(VOCAB, VARIANTS[i % 3], VARIANTS[(i / 3) % 3], mode(i / 9));
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store, &cfg, &mut rng);
        let corpus = random_corpus(&mut rng, 12, 3, 8, VOCAB);

        for lambda in [0.0, 1.0] {
            let (total, m, n) = losses(&store, &model, &corpus, 4, lambda, &mut rng);
            let dev = if lambda == 0.0 {
                (total - m).abs()
            } else {
                (total - (m + n)).abs()
            };
            let slot = if lambda == 0.0 {
                &mut out.lambda0_dev
            } else {
                &mut out.lambda1_dev
            };
            *slot = slot.max(dev);
        }

        zero_all(&mut store);
        for p in [1, 4, 9] {
            let (_, m, n) = losses(&store, &model, &corpus, p, 1.0, &mut rng);
            let want = ((p + 1) as f64).ln();
            out.zero_dev = out.zero_dev.max((m - want).abs()).max((n - want).abs());
        }
    }
    out
}

/// Largest |tape - oracle| for the MBP and NBP losses over `batches`
/// random batches, cycling through every encoder pairing and mask mode.
pub fn oracle_gap(batches: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for i in 0..batches {
        let cfg = tiny_config(VOCAB, VARIANTS[i % 3], VARIANTS[(i / 3) % 3], mode(i / 9));
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store, &cfg, &mut rng);
        let n_users = rng.gen_range(4..10);
        let corpus = random_corpus(&mut rng, n_users, 2, 9, VOCAB);
        let p = rng.gen_range(1..5);
        let k = rng.gen_range(1..3);
        let users: Vec<usize> = (0..corpus.len()).collect();
        let mbp: Vec<_> = users
            .iter()
            .filter_map(|&u| make_mbp_sample(&corpus, u, p, &mut rng).unwrap())
            .collect();
        let nbp: Vec<_> = users
            .iter()
            .filter_map(|&u| make_nbp_sample(&corpus, u, None, k, p, &mut rng).unwrap())
            .collect();
        let mut tape = Tape::new(&store);
        let obj = Objective {
            mbp: true,
            nbp: true,
            lambda: 1.0,
        };
        let l = forward_losses(&mut tape, &model, &corpus, &mbp, &nbp, obj).unwrap();
        let oracle = Oracle::new(&store, &cfg);
        worst = worst
            .max((tape.scalar(l.mbp.unwrap()) - oracle.mbp_loss(&corpus, &mbp)).abs())
            .max((tape.scalar(l.nbp.unwrap()) - oracle.nbp_loss(&corpus, &nbp)).abs());
    }
    worst
}

/// Random ranking instances where the library disagrees with the
/// brute-force oracles (exact comparison).
pub fn metric_mismatches(instances: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.gen_range(2..=40);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        if roc_auc(&scores, &labels).unwrap() != auc_oracle(&scores, &labels) {
            bad += 1;
        }
        if average_precision(&scores, &labels).unwrap() != ap_oracle(&scores, &labels) {
            bad += 1;
        }
    }
    bad
}

/// Pre-training users of the desk world with `n_users` users, via the
/// same files the CLI reads.
pub fn desk_corpus(dir: &Path, n_users: usize) -> (ExperimentConfig, Vec<UserRecord>) {
    let mut cfg = ExperimentConfig::default();
    cfg.world.n_pretrain_users = n_users;
    gen_data(&cfg, dir).unwrap();
    let vocab = load_vocab(dir).unwrap();
    let users = load_users(dir, PRETRAIN_FILE, &vocab, &cfg).unwrap();
    (cfg, users)
}

#[derive(Debug, Default)]
pub struct Hygiene {
    pub users: usize,
    pub candidate_sets: usize,
    pub same_user_negatives: usize,
    pub nbp_samples: usize,
    /// max |Δu| when every behavior from the split point on is replaced.
    pub leak: f64,
    /// |Δu| when an input behavior is replaced instead, so the probe is
    /// known to be sensitive.
    pub control: f64,
}

/// One full epoch of sample construction over `users`.
pub fn sampling_hygiene(cfg: &ExperimentConfig, users: Vec<UserRecord>) -> Hygiene {
    let vocab_size = users
        .iter()
        .flat_map(|u| u.behaviors.iter().flat_map(|b| b.tokens.iter()))
        .max()
        .map_or(2, |&t| t as usize + 1);
    let corpus = Corpus::new(users);
    let all: Vec<usize> = (0..corpus.len()).collect();
    let (mbp, nbp) = build_samples(&corpus, &all, &cfg.pretrain, 0).unwrap();

    let mut h = Hygiene {
        users: corpus.len(),
        nbp_samples: nbp.len(),
        ..Hygiene::default()
    };
    for s in &mbp {
        h.candidate_sets += 1;
        h.same_user_negatives += s
            .candidates
            .iter()
            .enumerate()
            .filter(|&(i, c)| i != s.gold_index && c.user == s.user)
            .count();
    }
    for s in &nbp {
        for (set, &g) in s.candidates.iter().zip(&s.gold_indices) {
            h.candidate_sets += 1;
            h.same_user_negatives += set
                .iter()
                .enumerate()
                .filter(|&(i, c)| i != g && c.user == s.user)
                .count();
        }
    }

    let mcfg = cfg.model.with_vocab(vocab_size);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = UserModel::new(&mut store, "user", &mcfg, &mut rng).unwrap();
    let embed = |c: &Corpus, s: &ptum::pretrain::NbpSample| {
        let mut t = Tape::new(&store);
        let u = nbp_user_embedding(&mut t, &model, c, s).unwrap();
        t.value(u).to_vec()
    };
    let mut perturbed = corpus.clone();
    if let Some(s) = nbp.first() {
        let mut c = corpus.clone();
        for tok in &mut c.users[s.user].behaviors[0].tokens {
            *tok = if *tok == 2 { 3 } else { 2 };
        }
        h.control = embed(&corpus, s)
            .iter()
            .zip(embed(&c, s))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
    }
    for s in &nbp {
        let before = embed(&corpus, s);
        for b in &mut perturbed.users[s.user].behaviors[s.n_inputs..] {
            for tok in &mut b.tokens {
                *tok = rng.gen_range(2..vocab_size as u32);
            }
        }
        for (a, b) in before.iter().zip(embed(&perturbed, s)) {
            h.leak = h.leak.max((a - b).abs());
        }
    }
    h
}
