//! Fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod metric_oracle;
pub mod oracle;

use std::collections::BTreeMap;

use ptum::autodiff::ParamStore;
use ptum::data::{Behavior, UserRecord};
use ptum::model::{BehaviorEncoderConfig, EncoderVariant, MaskMode, ModelConfig, UserEncoderConfig, UserModel};
use ptum::pretrain::Corpus;
use ptum::runner::ExperimentConfig;
use rand::Rng;

pub const VARIANTS: [EncoderVariant; 3] = [
    EncoderVariant::MeanPool,
    EncoderVariant::AttnPool,
    EncoderVariant::SelfAttn,
];

/// Users with `lo..=hi` behaviors of 1 to `max_title` random tokens.
pub fn random_users<R: Rng>(
    rng: &mut R,
    n: usize,
    lo: usize,
    hi: usize,
    vocab: usize,
    max_title: usize,
) -> Vec<UserRecord> {
    (0..n)
        .map(|u| UserRecord {
            user_id: format!("u{u}"),
            behaviors: (0..rng.gen_range(lo..=hi))
                .map(|position| Behavior {
                    tokens: (0..rng.gen_range(1..=max_title))
                        .map(|_| rng.gen_range(2..vocab as u32))
                        .collect(),
                    position,
                })
                .collect(),
            labels: BTreeMap::new(),
        })
        .collect()
}

pub fn random_corpus<R: Rng>(rng: &mut R, n: usize, lo: usize, hi: usize, vocab: usize) -> Corpus {
    Corpus::new(random_users(rng, n, lo, hi, vocab, 5))
}

/// A few-dozen-parameter model for gradient and oracle checks.
pub fn tiny_config(vocab: usize, behavior: EncoderVariant, user: EncoderVariant, mask_mode: MaskMode) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        behavior: BehaviorEncoderConfig {
            variant: behavior,
            word_dim: 4,
            n_heads: 2,
            head_dim: 2,
            attn_query_dim: 3,
        },
        user: UserEncoderConfig {
            variant: user,
            max_positions: 16,
            n_heads: 2,
            attn_query_dim: 3,
        },
        mask_mode,
    }
}

pub fn tiny_model<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> UserModel {
    let model = UserModel::new(store, "user", cfg, rng).unwrap();
    randomize(store, rng, 0.7);
    model
}

/// Redraws every parameter uniformly in `[-scale, scale]`, so no value sits
/// at its (often zero) initialization.
pub fn randomize<R: Rng>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for x in store.value_mut(id).data_mut() {
            *x = rng.gen_range(-scale..=scale);
        }
    }
}

/// Sets every parameter to zero.
pub fn zero_all(store: &mut ParamStore) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

/// A world and model small enough for end-to-end runs in a second or two.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.world.n_pretrain_users = 300;
    cfg.world.n_labeled_users = 200;
    cfg.world.n_ads = 40;
    cfg.world.vocab_size = 200;
    cfg.world.words_per_topic = 12;
    cfg.world.behaviors_per_user = [4, 10];
    cfg.data.min_freq = 3;
    cfg.model.behavior.word_dim = 8;
    cfg.model.behavior.n_heads = 2;
    cfg.model.behavior.head_dim = 4;
    cfg.model.behavior.attn_query_dim = 6;
    cfg.model.user.n_heads = 2;
    cfg.model.user.attn_query_dim = 6;
    cfg.pretrain.epochs = 1;
    cfg.finetune.epochs = 2;
    cfg.seeds = vec![0, 1, 2];
    cfg
}
