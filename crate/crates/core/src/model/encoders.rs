use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{masked_mean, AdditiveAttention, MultiHeadSelfAttention};
use crate::autodiff::{uniform_init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data::{UserRecord, PAD_ID};
use crate::error::{Error, Result};

/// Embedding tables are initialized uniformly in `[-EMBED_INIT, EMBED_INIT]`.
pub const EMBED_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    MeanPool,
    AttnPool,
    SelfAttn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// The masked slot holds the learned MASK vector plus its position.
    Replace,
    /// The masked slot is dropped from the user encoder's input.
    Remove,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorEncoderConfig {
    pub variant: EncoderVariant,
    pub word_dim: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub attn_query_dim: usize,
}

impl Default for BehaviorEncoderConfig {
    fn default() -> Self {
        BehaviorEncoderConfig {
            variant: EncoderVariant::SelfAttn,
            word_dim: 32,
            n_heads: 4,
            head_dim: 8,
            attn_query_dim: 32,
        }
    }
}

impl BehaviorEncoderConfig {
    /// Output dimension of a behavior embedding.
    pub fn output_dim(&self) -> usize {
        match self.variant {
            EncoderVariant::SelfAttn => self.n_heads * self.head_dim,
            _ => self.word_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UserEncoderConfig {
    pub variant: EncoderVariant,
    pub max_positions: usize,
    /// Heads of the self-attention variant; head dim is `d_b / n_heads`.
    pub n_heads: usize,
    pub attn_query_dim: usize,
}

impl Default for UserEncoderConfig {
    fn default() -> Self {
        UserEncoderConfig {
            variant: EncoderVariant::SelfAttn,
            max_positions: 100,
            n_heads: 4,
            attn_query_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub behavior: BehaviorEncoderConfig,
    pub user: UserEncoderConfig,
    pub mask_mode: MaskMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 2,
            behavior: BehaviorEncoderConfig::default(),
            user: UserEncoderConfig::default(),
            mask_mode: MaskMode::Replace,
        }
    }
}

impl ModelConfig {
    pub fn embedding_dim(&self) -> usize {
        self.behavior.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.behavior;
        if self.vocab_size < 2 || b.word_dim == 0 || b.attn_query_dim == 0 || self.user.attn_query_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if b.variant == EncoderVariant::SelfAttn && (b.n_heads == 0 || b.head_dim == 0) {
            return Err(Error::Config(
                "self_attn behavior encoder needs n_heads, head_dim > 0".into(),
            ));
        }
        if self.user.max_positions == 0 {
            return Err(Error::Config("user.max_positions must be positive".into()));
        }
        let d = self.embedding_dim();
        if self.user.variant == EncoderVariant::SelfAttn
            && (self.user.n_heads == 0 || !d.is_multiple_of(self.user.n_heads))
        {
            return Err(Error::Config(format!(
                "user self_attn heads ({}) must divide the behavior dim {d}",
                self.user.n_heads
            )));
        }
        Ok(())
    }
}

/// Title tokens of `n` behaviors padded to a common length.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub n: usize,
    pub max_len: usize,
    pub ids: Vec<usize>,
    pub keep: Vec<bool>,
}

impl TokenBatch {
    pub fn new<T: AsRef<[u32]>>(titles: &[T]) -> Result<Self> {
        Self::with_len(titles, 0)
    }

    /// Pads to at least `min_len` tokens per behavior.
    pub fn with_len<T: AsRef<[u32]>>(titles: &[T], min_len: usize) -> Result<Self> {
        let max_len = titles.iter().map(|t| t.as_ref().len()).max().unwrap_or(0).max(min_len);
        let n = titles.len();
        let mut ids = vec![PAD_ID as usize; n * max_len];
        let mut keep = vec![false; n * max_len];
        for (i, t) in titles.iter().enumerate() {
            let t = t.as_ref();
            if t.is_empty() {
                return Err(Error::Contract(format!("behavior {i} has no tokens")));
            }
            for (j, &tok) in t.iter().enumerate() {
                ids[i * max_len + j] = tok as usize;
                keep[i * max_len + j] = true;
            }
        }
        Ok(TokenBatch { n, max_len, ids, keep })
    }
}

/// What a user-encoder input slot holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Row of the behavior-embedding matrix.
    Behavior(usize),
    /// The learned MASK vector.
    Mask,
    Pad,
}

/// `[B, M]` arrangement of behavior embeddings into user sequences.
#[derive(Clone, Debug)]
pub struct UserLayout {
    pub batch: usize,
    pub slots_per_user: usize,
    slots: Vec<Slot>,
    positions: Vec<usize>,
}

impl UserLayout {
    /// Builds from per-user `(slot, position)` sequences, padding to the
    /// longest one.
    pub fn new(users: &[Vec<(Slot, usize)>]) -> Result<Self> {
        let m = users.iter().map(Vec::len).max().unwrap_or(0);
        let mut slots = Vec::with_capacity(users.len() * m);
        let mut positions = Vec::with_capacity(users.len() * m);
        for (i, u) in users.iter().enumerate() {
            if !u.iter().any(|(s, _)| *s != Slot::Pad) {
                return Err(Error::Contract(format!("user {i} has no unmasked behavior")));
            }
            for &(s, p) in u {
                slots.push(s);
                positions.push(if s == Slot::Pad { 0 } else { p });
            }
            for _ in u.len()..m {
                slots.push(Slot::Pad);
                positions.push(0);
            }
        }
        Ok(UserLayout {
            batch: users.len(),
            slots_per_user: m,
            slots,
            positions,
        })
    }

    pub fn keep(&self) -> Vec<bool> {
        self.slots.iter().map(|s| *s != Slot::Pad).collect()
    }
}

#[derive(Clone, Debug)]
enum Aggregator {
    Mean,
    Attn(AdditiveAttention),
    SelfAttn(MultiHeadSelfAttention, AdditiveAttention),
}

impl Aggregator {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        variant: EncoderVariant,
        in_dim: usize,
        n_heads: usize,
        head_dim: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(match variant {
            EncoderVariant::MeanPool => Aggregator::Mean,
            EncoderVariant::AttnPool => Aggregator::Attn(AdditiveAttention::new(
                store,
                &format!("{prefix}.pool"),
                in_dim,
                query_dim,
                rng,
            )?),
            EncoderVariant::SelfAttn => {
                let mhsa =
                    MultiHeadSelfAttention::new(store, &format!("{prefix}.mhsa"), in_dim, n_heads, head_dim, rng)?;
                let pool = AdditiveAttention::new(store, &format!("{prefix}.pool"), mhsa.out_dim(), query_dim, rng)?;
                Aggregator::SelfAttn(mhsa, pool)
            }
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
        match self {
            Aggregator::Mean => masked_mean(tape, x, keep),
            Aggregator::Attn(pool) => pool.pool(tape, x, keep),
            Aggregator::SelfAttn(mhsa, pool) => {
                let h = mhsa.forward(tape, x, keep)?;
                pool.pool(tape, h, keep)
            }
        }
    }
}

/// Title tokens → behavior embedding.
#[derive(Clone, Debug)]
pub struct BehaviorEncoder {
    pub word_emb: ParamId,
    word_dim: usize,
    out_dim: usize,
    agg: Aggregator,
}

impl BehaviorEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &BehaviorEncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let word_emb = store.register(
            format!("{prefix}.word_emb"),
            uniform_init(rng, &[vocab_size, cfg.word_dim], EMBED_INIT),
        )?;
        let agg = Aggregator::new(
            store,
            prefix,
            cfg.variant,
            cfg.word_dim,
            cfg.n_heads,
            cfg.head_dim,
            cfg.attn_query_dim,
            rng,
        )?;
        Ok(BehaviorEncoder {
            word_emb,
            word_dim: cfg.word_dim,
            out_dim: cfg.output_dim(),
            agg,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.out_dim
    }

    /// `[n, d_b]` embeddings of every behavior in `tokens`.
    pub fn encode(&self, tape: &mut Tape, tokens: &TokenBatch) -> Result<Var> {
        if tokens.n == 0 {
            return Err(Error::Contract("no behaviors to encode".into()));
        }
        let emb = tape.embedding(self.word_emb, &tokens.ids)?;
        let x = tape.reshape(emb, &[tokens.n, tokens.max_len, self.word_dim])?;
        self.agg.apply(tape, x, &tokens.keep)
    }
}

/// Positioned behavior embeddings → user embedding.
#[derive(Clone, Debug)]
pub struct UserEncoder {
    pub pos_emb: ParamId,
    pub mask_vec: ParamId,
    dim: usize,
    max_positions: usize,
    agg: Aggregator,
}

impl UserEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &UserEncoderConfig,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let pos_emb = store.register(
            format!("{prefix}.pos_emb"),
            uniform_init(rng, &[cfg.max_positions, dim], EMBED_INIT),
        )?;
        let mask_vec = store.register(format!("{prefix}.mask_vec"), uniform_init(rng, &[1, dim], EMBED_INIT))?;
        let head_dim = dim / cfg.n_heads.max(1);
        let agg = Aggregator::new(
            store,
            prefix,
            cfg.variant,
            dim,
            cfg.n_heads,
            head_dim,
            cfg.attn_query_dim,
            rng,
        )?;
        Ok(UserEncoder {
            pos_emb,
            mask_vec,
            dim,
            max_positions: cfg.max_positions,
            agg,
        })
    }

    /// `[B, d_b]` user embeddings. `behaviors: [n, d_b]` is indexed by the
    /// layout's `Slot::Behavior` rows.
    pub fn encode(&self, tape: &mut Tape, behaviors: Var, layout: &UserLayout) -> Result<Var> {
        let n = tape.shape(behaviors)[0];
        let uses_mask = layout.slots.contains(&Slot::Mask);
        let (table, offset) = if uses_mask {
            let m = tape.param(self.mask_vec);
            (tape.concat(&[m, behaviors], 0)?, 1)
        } else {
            (behaviors, 0)
        };
        let mut idx = Vec::with_capacity(layout.slots.len());
        for s in &layout.slots {
            idx.push(match *s {
                Slot::Behavior(r) if r >= n => {
                    return Err(Error::Index {
                        what: "behavior embeddings",
                        index: r,
                        bound: n,
                    })
                }
                Slot::Behavior(r) => r + offset,
                Slot::Mask | Slot::Pad => 0,
            });
        }
        if let Some(&p) = layout.positions.iter().find(|&&p| p >= self.max_positions) {
            return Err(Error::Index {
                what: "position table",
                index: p,
                bound: self.max_positions,
            });
        }
        let x = tape.gather_rows(table, &idx)?;
        let pos = tape.embedding(self.pos_emb, &layout.positions)?;
        let x = tape.add(x, pos)?;
        let x = tape.reshape(x, &[layout.batch, layout.slots_per_user, self.dim])?;
        self.agg.apply(tape, x, &layout.keep())
    }
}

/// Behavior encoder + user encoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct UserModel {
    pub config: ModelConfig,
    pub behavior: BehaviorEncoder,
    pub user: UserEncoder,
    prefix: String,
}

impl UserModel {
    /// Registers all parameters under `prefix.` in `store`.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let behavior = BehaviorEncoder::new(
            store,
            &format!("{prefix}.behavior"),
            &config.behavior,
            config.vocab_size,
            rng,
        )?;
        let user = UserEncoder::new(
            store,
            &format!("{prefix}.user"),
            &config.user,
            behavior.output_dim(),
            rng,
        )?;
        Ok(UserModel {
            config: config.clone(),
            behavior,
            user,
            prefix: prefix.to_string(),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dim(&self) -> usize {
        self.behavior.output_dim()
    }

    pub fn encode_behaviors(&self, tape: &mut Tape, tokens: &TokenBatch) -> Result<Var> {
        self.behavior.encode(tape, tokens)
    }

    pub fn encode_users(&self, tape: &mut Tape, behaviors: Var, layout: &UserLayout) -> Result<Var> {
        self.user.encode(tape, behaviors, layout)
    }

    /// Encodes whole users: `[B, d_b]`.
    pub fn encode_records(&self, tape: &mut Tape, users: &[&UserRecord]) -> Result<Var> {
        let mut titles: Vec<&[u32]> = Vec::new();
        let mut seqs = Vec::with_capacity(users.len());
        for u in users {
            if u.behaviors.is_empty() {
                return Err(Error::Contract(format!("user {} has no behaviors", u.user_id)));
            }
            let seq = u
                .behaviors
                .iter()
                .map(|b| {
                    titles.push(&b.tokens);
                    (Slot::Behavior(titles.len() - 1), b.position)
                })
                .collect();
            seqs.push(seq);
        }
        let tokens = TokenBatch::new(&titles)?;
        let beh = self.encode_behaviors(tape, &tokens)?;
        self.encode_users(tape, beh, &UserLayout::new(&seqs)?)
    }

    /// Encodes one user with behavior `masked_index` replaced by the MASK
    /// vector (or dropped, in `MaskMode::Remove`). Returns `[1, d_b]`.
    pub fn encode_with_mask_slot(&self, tape: &mut Tape, user: &UserRecord, masked_index: usize) -> Result<Var> {
        let n = user.behaviors.len();
        if n < 2 {
            return Err(Error::Contract(format!(
                "masking needs at least 2 behaviors, user {} has {n}",
                user.user_id
            )));
        }
        if masked_index >= n {
            return Err(Error::Index {
                what: "user behaviors",
                index: masked_index,
                bound: n,
            });
        }
        let titles: Vec<&[u32]> = user
            .behaviors
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != masked_index)
            .map(|(_, b)| b.tokens.as_slice())
            .collect();
        let mut row = 0;
        let seq: Vec<(Slot, usize)> = user
            .behaviors
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if i == masked_index {
                    let slot = match self.config.mask_mode {
                        MaskMode::Replace => Slot::Mask,
                        MaskMode::Remove => Slot::Pad,
                    };
                    (slot, b.position)
                } else {
                    row += 1;
                    (Slot::Behavior(row - 1), b.position)
                }
            })
            .collect();
        let beh = self.encode_behaviors(tape, &TokenBatch::new(&titles)?)?;
        self.encode_users(tape, beh, &UserLayout::new(&[seq])?)
    }

    /// Current value of every parameter this model owns.
    pub fn param_ids<'a>(&'a self, store: &'a ParamStore) -> impl Iterator<Item = ParamId> + 'a {
        let prefix = format!("{}.", self.prefix);
        store
            .iter()
            .filter(move |(_, p)| p.name.starts_with(&prefix))
            .map(|(id, _)| id)
    }

    pub fn set_trainable(&self, store: &mut ParamStore, trainable: bool) {
        store.set_trainable_prefix(&format!("{}.", self.prefix), trainable);
    }

    /// Zeroes the position table (used to check order sensitivity).
    pub fn zero_positions(&self, store: &mut ParamStore) {
        let shape = store.value(self.user.pos_emb).shape().to_vec();
        *store.value_mut(self.user.pos_emb) = Tensor::zeros(shape);
    }
}
