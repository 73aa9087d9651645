use rand::Rng;

use crate::autodiff::{glorot_init, ParamId, ParamStore, Tape, Tensor, Var, MASK_LOGIT};
use crate::error::Result;

/// `softmax_j(qᵀ tanh(W x_j + b))`-weighted sum over a masked sequence.
#[derive(Clone, Debug)]
pub struct AdditiveAttention {
    w: ParamId,
    b: ParamId,
    q: ParamId,
    dim: usize,
}

impl AdditiveAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        query_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(AdditiveAttention {
            w: store.register(format!("{prefix}.w"), glorot_init(rng, dim, query_dim))?,
            b: store.register(format!("{prefix}.b"), Tensor::zeros(vec![query_dim]))?,
            q: store.register(format!("{prefix}.q"), glorot_init(rng, query_dim, 1))?,
            dim,
        })
    }

    /// Attention weights `[B, 1, M]` for `x: [B, M, d]` with `keep: [B*M]`.
    pub fn weights(&self, tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, m) = (shape[0], shape[1]);
        let flat = tape.reshape(x, &[b * m, self.dim])?;
        let w = tape.param(self.w);
        let bias = tape.param(self.b);
        let q = tape.param(self.q);
        let h = tape.matmul(flat, w)?;
        let h = tape.add_row(h, bias)?;
        let h = tape.tanh(h);
        let s = tape.matmul(h, q)?;
        let s = tape.mask_fill(s, keep, MASK_LOGIT)?;
        let s = tape.reshape(s, &[b, 1, m])?;
        tape.softmax(s)
    }

    /// Pools `x: [B, M, d]` to `[B, d]`.
    pub fn pool(&self, tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
        let b = tape.shape(x)[0];
        let a = self.weights(tape, x, keep)?;
        let out = tape.batch_matmul(a, x, false)?;
        tape.reshape(out, &[b, self.dim])
    }
}

/// One multi-head scaled dot-product self-attention layer without an output
/// projection; heads are concatenated.
#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    heads: Vec<[ParamId; 3]>,
    in_dim: usize,
    head_dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        n_heads: usize,
        head_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let mut ids = [ParamId(0); 3];
            for (slot, name) in ids.iter_mut().zip(["wq", "wk", "wv"]) {
                *slot = store.register(format!("{prefix}.h{h}.{name}"), glorot_init(rng, in_dim, head_dim))?;
            }
            heads.push(ids);
        }
        Ok(MultiHeadSelfAttention {
            heads,
            in_dim,
            head_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.heads.len() * self.head_dim
    }

    /// `x: [B, M, in]` → `[B, M, heads*head_dim]`; keys with `keep == false`
    /// are excluded from every query's softmax.
    pub fn forward(&self, tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let (b, m) = (shape[0], shape[1]);
        let flat = tape.reshape(x, &[b * m, self.in_dim])?;
        // key mask broadcast over queries: [B, M(query), M(key)]
        let key_keep: Vec<bool> = (0..b)
            .flat_map(|i| (0..m).flat_map(move |_| (0..m).map(move |k| (i, k))))
            .map(|(i, k)| keep[i * m + k])
            .collect();
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for [wq, wk, wv] in &self.heads {
            let proj = |w: ParamId, tape: &mut Tape| -> Result<Var> {
                let w = tape.param(w);
                let p = tape.matmul(flat, w)?;
                tape.reshape(p, &[b, m, self.head_dim])
            };
            let q = proj(*wq, tape)?;
            let k = proj(*wk, tape)?;
            let v = proj(*wv, tape)?;
            let s = tape.batch_matmul(q, k, true)?;
            let s = tape.scale(s, scale);
            let s = tape.mask_fill(s, &key_keep, MASK_LOGIT)?;
            let a = tape.softmax(s)?;
            outs.push(tape.batch_matmul(a, v, false)?);
        }
        tape.concat(&outs, 2)
    }
}

/// Mean over unmasked positions of `x: [B, M, d]` → `[B, d]`.
pub fn masked_mean(tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, m, d) = (shape[0], shape[1], shape[2]);
    let mut w = vec![0.0; b * m];
    for i in 0..b {
        let row = &keep[i * m..(i + 1) * m];
        let n = row.iter().filter(|&&k| k).count().max(1) as f64;
        for (j, &k) in row.iter().enumerate() {
            if k {
                w[i * m + j] = 1.0 / n;
            }
        }
    }
    let w = tape.constant(Tensor::new(vec![b, 1, m], w)?);
    let out = tape.batch_matmul(w, x, false)?;
    tape.reshape(out, &[b, d])
}
