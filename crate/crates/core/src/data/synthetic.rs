//! Synthetic behavior worlds with planted group/topic structure.
//!
//! Every user belongs to a latent group. A group owns a mixture over topics,
//! each user perturbs it, and each behavior is a short title drawn from one
//! topic's word distribution (plus uniform background words). Demographic
//! labels are the group; CTR clicks depend on group-to-ad-topic affinity.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Dirichlet;
use serde::{Deserialize, Serialize};

use super::ingest::{RawImpression, RawUser};
use crate::error::{Error, Result};

pub const GROUP_LABEL: &str = "group";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    pub n_groups: usize,
    pub n_topics: usize,
    pub vocab_size: usize,
    pub words_per_topic: usize,
    /// Inclusive range.
    pub behaviors_per_user: [usize; 2],
    /// Inclusive range.
    pub title_len: [usize; 2],
    /// Symmetric Dirichlet concentration of each group's topic mixture.
    pub group_concentration: f64,
    /// Scale of the per-user Dirichlet centred on the group mixture.
    pub user_concentration: f64,
    /// Probability that a title word is drawn uniformly from the vocabulary.
    pub noise_prob: f64,
    pub n_pretrain_users: usize,
    pub n_labeled_users: usize,
    pub n_ads: usize,
    pub impressions_per_user: usize,
    /// Explicit `G x T` click logits; derived from the mixtures when absent.
    pub ctr_affinity: Option<Vec<Vec<f64>>>,
    pub affinity_strength: f64,
    pub seed: u64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n_groups: 4,
            n_topics: 16,
            vocab_size: 1000,
            words_per_topic: 40,
            behaviors_per_user: [6, 20],
            title_len: [4, 10],
            group_concentration: 0.5,
            user_concentration: 4.0,
            noise_prob: 0.2,
            n_pretrain_users: 10_000,
            n_labeled_users: 2_000,
            n_ads: 300,
            impressions_per_user: 5,
            ctr_affinity: None,
            affinity_strength: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_groups", self.n_groups),
            ("n_topics", self.n_topics),
            ("vocab_size", self.vocab_size),
            ("words_per_topic", self.words_per_topic),
            ("behaviors_per_user[0]", self.behaviors_per_user[0]),
            ("title_len[0]", self.title_len[0]),
            ("n_ads", self.n_ads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("world.{name} must be positive")));
            }
        }
        if self.behaviors_per_user[0] > self.behaviors_per_user[1] || self.title_len[0] > self.title_len[1] {
            return Err(Error::Config("world ranges must be [min, max] with min <= max".into()));
        }
        if self.words_per_topic > self.vocab_size {
            return Err(Error::Config("world.words_per_topic exceeds vocab_size".into()));
        }
        if !(self.group_concentration > 0.0 && self.user_concentration > 0.0) {
            return Err(Error::Config("world concentrations must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Config("world.noise_prob must be in [0, 1]".into()));
        }
        if let Some(a) = &self.ctr_affinity {
            if a.len() != self.n_groups || a.iter().any(|r| r.len() != self.n_topics) {
                return Err(Error::Config(format!(
                    "world.ctr_affinity must be {} x {}",
                    self.n_groups, self.n_topics
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldCounts {
    pub pretrain_users: usize,
    pub demo_users: usize,
    pub ctr_impressions: usize,
    pub ctr_clicks: usize,
    pub pretrain_behaviors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub config: SyntheticWorldConfig,
    pub group_mixture: Vec<Vec<f64>>,
    pub affinity: Vec<Vec<f64>>,
    pub counts: WorldCounts,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub pretrain: Vec<RawUser>,
    /// Labeled users; also the users of the CTR impressions.
    pub demo: Vec<RawUser>,
    pub ctr: Vec<RawImpression>,
    pub meta: WorldMeta,
}

pub fn word(id: usize) -> String {
    format!("w{id:04}")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Topics {
    words: Vec<Vec<usize>>,
    weights: Vec<WeightedIndex<f64>>,
}

impl Topics {
    fn title<R: Rng>(&self, cfg: &SyntheticWorldConfig, topic: usize, rng: &mut R) -> String {
        let len = rng.gen_range(cfg.title_len[0]..=cfg.title_len[1]);
        let words: Vec<String> = (0..len)
            .map(|_| {
                let id = if rng.gen_bool(cfg.noise_prob) {
                    rng.gen_range(0..cfg.vocab_size)
                } else {
                    self.words[topic][self.weights[topic].sample(rng)]
                };
                word(id)
            })
            .collect();
        words.join(" ")
    }
}

fn user_mixture<R: Rng>(cfg: &SyntheticWorldConfig, group_mix: &[f64], rng: &mut R) -> Vec<f64> {
    let alpha: Vec<f64> = group_mix
        .iter()
        .map(|p| (p * cfg.user_concentration).max(1e-3))
        .collect();
    Dirichlet::new(&alpha).expect("positive alphas").sample(rng)
}

fn gen_user<R: Rng>(
    cfg: &SyntheticWorldConfig,
    topics: &Topics,
    group_mix: &[f64],
    user_id: String,
    rng: &mut R,
) -> RawUser {
    let mix = user_mixture(cfg, group_mix, rng);
    let topic_dist = WeightedIndex::new(&mix).expect("valid mixture");
    let n = rng.gen_range(cfg.behaviors_per_user[0]..=cfg.behaviors_per_user[1]);
    let behaviors = (0..n)
        .map(|_| {
            let t = topic_dist.sample(rng);
            topics.title(cfg, t, rng)
        })
        .collect();
    RawUser {
        user_id,
        behaviors,
        labels: Default::default(),
    }
}

/// Generates a world. Identical configs produce identical worlds.
pub fn generate_synthetic(cfg: &SyntheticWorldConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let zipf: Vec<f64> = (0..cfg.words_per_topic).map(|r| 1.0 / (r as f64 + 1.0)).collect();
    let topics = Topics {
        words: (0..cfg.n_topics)
            .map(|_| sample(&mut rng, cfg.vocab_size, cfg.words_per_topic).into_vec())
            .collect(),
        weights: (0..cfg.n_topics)
            .map(|_| WeightedIndex::new(&zipf).expect("positive weights"))
            .collect(),
    };

    let group_mixture: Vec<Vec<f64>> = if cfg.n_topics == 1 {
        vec![vec![1.0]; cfg.n_groups]
    } else {
        let dir = Dirichlet::new_with_size(cfg.group_concentration, cfg.n_topics).expect("valid dirichlet");
        (0..cfg.n_groups).map(|_| dir.sample(&mut rng)).collect()
    };

    let affinity = cfg.ctr_affinity.clone().unwrap_or_else(|| {
        let t = cfg.n_topics as f64;
        group_mixture
            .iter()
            .map(|row| {
                row.iter()
                    .map(|p| (cfg.affinity_strength * (t * p - 1.0)).clamp(-4.0, 4.0))
                    .collect()
            })
            .collect()
    });

    let mut pretrain = Vec::with_capacity(cfg.n_pretrain_users);
    for i in 0..cfg.n_pretrain_users {
        let g = rng.gen_range(0..cfg.n_groups);
        pretrain.push(gen_user(cfg, &topics, &group_mixture[g], format!("p{i:06}"), &mut rng));
    }

    let mut demo = Vec::with_capacity(cfg.n_labeled_users);
    let mut groups = Vec::with_capacity(cfg.n_labeled_users);
    for i in 0..cfg.n_labeled_users {
        let g = rng.gen_range(0..cfg.n_groups);
        let mut u = gen_user(cfg, &topics, &group_mixture[g], format!("d{i:06}"), &mut rng);
        u.labels.insert(GROUP_LABEL.to_string(), g);
        demo.push(u);
        groups.push(g);
    }

    let ads: Vec<(usize, String, String)> = (0..cfg.n_ads)
        .map(|_| {
            let t = rng.gen_range(0..cfg.n_topics);
            let title = topics.title(cfg, t, &mut rng);
            let desc = topics.title(cfg, t, &mut rng);
            (t, title, desc)
        })
        .collect();

    let mut ctr = Vec::with_capacity(cfg.n_labeled_users * cfg.impressions_per_user);
    for (u, &g) in demo.iter().zip(&groups) {
        for _ in 0..cfg.impressions_per_user {
            let (t, title, desc) = &ads[rng.gen_range(0..ads.len())];
            let click = rng.gen_bool(sigmoid(affinity[g][*t]));
            ctr.push(RawImpression {
                user_id: u.user_id.clone(),
                ad_title: title.clone(),
                ad_desc: desc.clone(),
                click: click as u8,
            });
        }
    }

    let counts = WorldCounts {
        pretrain_users: pretrain.len(),
        demo_users: demo.len(),
        ctr_impressions: ctr.len(),
        ctr_clicks: ctr.iter().filter(|i| i.click == 1).count(),
        pretrain_behaviors: pretrain.iter().map(|u| u.behaviors.len()).sum(),
    };
    Ok(SyntheticWorld {
        pretrain,
        demo,
        ctr,
        meta: WorldMeta {
            config: cfg.clone(),
            group_mixture,
            affinity,
            counts,
        },
    })
}
