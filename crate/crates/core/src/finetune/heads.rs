use rand::Rng;

use crate::autodiff::{glorot_init, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BehaviorEncoder, TokenBatch, UserModel};
use crate::pretrain::predict_scores;

/// Dense `d × C` layer with bias over user embeddings.
#[derive(Clone, Debug)]
pub struct ClassificationHead {
    pub w: ParamId,
    pub b: ParamId,
    n_classes: usize,
}

impl ClassificationHead {
    /// Registers `head.w` (Glorot) and `head.b` (zeros).
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, n_classes: usize, rng: &mut R) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::Data(format!(
                "classification needs at least 2 classes, got {n_classes}"
            )));
        }
        let w = store.register("head.w", glorot_init(rng, dim, n_classes))?;
        let b = store.register("head.b", Tensor::zeros(vec![n_classes]))?;
        Ok(ClassificationHead { w, b, n_classes })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// `[B, d]` → `[B, C]` logits.
    pub fn logits(&self, tape: &mut Tape, users: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        let z = tape.matmul(users, w)?;
        tape.add_row(z, b)
    }
}

/// Ad encoder plus the dot-product click scorer.
#[derive(Clone, Debug)]
pub struct CtrHead {
    pub ad: BehaviorEncoder,
}

pub const AD_PREFIX: &str = "ad";

impl CtrHead {
    /// Registers a separate behavior-encoder instance under `ad.` and copies
    /// the user model's behavior-encoder weights into it.
    pub fn new<R: Rng>(store: &mut ParamStore, model: &UserModel, rng: &mut R) -> Result<Self> {
        let ad = BehaviorEncoder::new(store, AD_PREFIX, &model.config.behavior, model.config.vocab_size, rng)?;
        let src = format!("{}.behavior.", model.prefix());
        let copies: Vec<(ParamId, Tensor)> = store
            .iter()
            .filter_map(|(_, p)| {
                let suffix = p.name.strip_prefix(&src)?;
                let dst = store.id(&format!("{AD_PREFIX}.{suffix}"))?;
                Some((dst, p.value.clone()))
            })
            .collect();
        for (dst, value) in copies {
            *store.value_mut(dst) = value;
        }
        Ok(CtrHead { ad })
    }

    /// Click logits `u · ad` for paired rows: `users: [B, d]` → `[B, 1]`.
    pub fn logits(&self, tape: &mut Tape, users: Var, ads: &TokenBatch) -> Result<Var> {
        let a = self.ad.encode(tape, ads)?;
        let (b, d) = (tape.shape(a)[0], tape.shape(a)[1]);
        let a = tape.reshape(a, &[b, 1, d])?;
        predict_scores(tape, users, a)
    }
}
