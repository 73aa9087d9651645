//! Straight-line scalar recomputation of the pre-training losses.
//!
//! Shares nothing with the tape: parameters are read by name and every
//! quantity is a plain loop over `f64`s.

use ptum::autodiff::ParamStore;
use ptum::model::{EncoderVariant, MaskMode, ModelConfig};
use ptum::pretrain::{Corpus, MbpSample, NbpSample};

type Vector = Vec<f64>;

pub struct Oracle<'a> {
    store: &'a ParamStore,
    cfg: &'a ModelConfig,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(s: &[f64]) -> Vector {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vector = s.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn cross_entropy(scores: &[f64], gold: usize) -> f64 {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - scores[gold]
}

impl<'a> Oracle<'a> {
    pub fn new(store: &'a ParamStore, cfg: &'a ModelConfig) -> Self {
        Oracle { store, cfg }
    }

    fn p(&self, name: &str) -> (&'a [f64], &'a [usize]) {
        let id = self.store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let t = self.store.value(id);
        (t.data(), t.shape())
    }

    /// Row `i` of a 2-D parameter.
    fn row(&self, name: &str, i: usize) -> Vector {
        let (d, s) = self.p(name);
        d[i * s[1]..(i + 1) * s[1]].to_vec()
    }

    /// `x · W` for `W: [in, out]`.
    fn affine(&self, x: &[f64], w: &str) -> Vector {
        let (d, s) = self.p(w);
        (0..s[1])
            .map(|j| (0..s[0]).map(|i| x[i] * d[i * s[1] + j]).sum())
            .collect()
    }

    /// Additive attention pooling of `xs`.
    fn attn_pool(&self, prefix: &str, xs: &[Vector]) -> Vector {
        let (b, _) = self.p(&format!("{prefix}.b"));
        let (q, _) = self.p(&format!("{prefix}.q"));
        let scores: Vector = xs
            .iter()
            .map(|x| {
                let h: Vector = self
                    .affine(x, &format!("{prefix}.w"))
                    .iter()
                    .zip(b)
                    .map(|(v, bb)| (v + bb).tanh())
                    .collect();
                dot(&h, q)
            })
            .collect();
        let a = softmax(&scores);
        let mut out = vec![0.0; xs[0].len()];
        for (x, w) in xs.iter().zip(&a) {
            for (o, v) in out.iter_mut().zip(x) {
                *o += w * v;
            }
        }
        out
    }

    #[allow(clippy::needless_range_loop)]
    fn self_attn(&self, prefix: &str, xs: &[Vector], n_heads: usize) -> Vec<Vector> {
        let mut out = vec![Vec::new(); xs.len()];
        for h in 0..n_heads {
            let proj = |w: &str| -> Vec<Vector> {
                xs.iter()
                    .map(|x| self.affine(x, &format!("{prefix}.h{h}.{w}")))
                    .collect()
            };
            let (q, k, v) = (proj("wq"), proj("wk"), proj("wv"));
            let scale = 1.0 / (q[0].len() as f64).sqrt();
            for i in 0..xs.len() {
                let s: Vector = k.iter().map(|kj| dot(&q[i], kj) * scale).collect();
                let a = softmax(&s);
                for c in 0..v[0].len() {
                    out[i].push((0..xs.len()).map(|j| a[j] * v[j][c]).sum());
                }
            }
        }
        out
    }

    fn aggregate(&self, prefix: &str, variant: EncoderVariant, xs: &[Vector], n_heads: usize) -> Vector {
        match variant {
            EncoderVariant::MeanPool => {
                let mut out = vec![0.0; xs[0].len()];
                for x in xs {
                    for (o, v) in out.iter_mut().zip(x) {
                        *o += v / xs.len() as f64;
                    }
                }
                out
            }
            EncoderVariant::AttnPool => self.attn_pool(&format!("{prefix}.pool"), xs),
            EncoderVariant::SelfAttn => {
                let h = self.self_attn(&format!("{prefix}.mhsa"), xs, n_heads);
                self.attn_pool(&format!("{prefix}.pool"), &h)
            }
        }
    }

    pub fn behavior(&self, tokens: &[u32]) -> Vector {
        let words: Vec<Vector> = tokens
            .iter()
            .map(|&t| self.row("user.behavior.word_emb", t as usize))
            .collect();
        let b = &self.cfg.behavior;
        self.aggregate("user.behavior", b.variant, &words, b.n_heads)
    }

    /// `slots` are `(embedding, position)`; `None` marks the MASK slot.
    pub fn user(&self, slots: &[(Option<Vector>, usize)]) -> Vector {
        let xs: Vec<Vector> = slots
            .iter()
            .map(|(e, p)| {
                let base = e.clone().unwrap_or_else(|| self.row("user.user.mask_vec", 0));
                base.iter()
                    .zip(self.row("user.user.pos_emb", *p))
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect();
        self.aggregate("user.user", self.cfg.user.variant, &xs, self.cfg.user.n_heads)
    }

    pub fn mbp_loss(&self, corpus: &Corpus, samples: &[MbpSample]) -> f64 {
        let mut total = 0.0;
        for s in samples {
            let rec = &corpus.users[s.user];
            let mut slots = Vec::new();
            for (i, b) in rec.behaviors.iter().enumerate() {
                if i != s.masked_index {
                    slots.push((Some(self.behavior(&b.tokens)), b.position));
                } else if self.cfg.mask_mode == MaskMode::Replace {
                    slots.push((None, b.position));
                }
            }
            let u = self.user(&slots);
            let scores: Vector = s
                .candidates
                .iter()
                .map(|&c| dot(&u, &self.behavior(corpus.tokens(c))))
                .collect();
            total += cross_entropy(&scores, s.gold_index);
        }
        total / samples.len() as f64
    }

    pub fn nbp_loss(&self, corpus: &Corpus, samples: &[NbpSample]) -> f64 {
        let mut total = 0.0;
        let mut rows = 0;
        for s in samples {
            let rec = &corpus.users[s.user];
            let slots: Vec<_> = rec.behaviors[..s.n_inputs]
                .iter()
                .map(|b| (Some(self.behavior(&b.tokens)), b.position))
                .collect();
            let u = self.user(&slots);
            for (set, &g) in s.candidates.iter().zip(&s.gold_indices) {
                let scores: Vector = set.iter().map(|&c| dot(&u, &self.behavior(corpus.tokens(c)))).collect();
                total += cross_entropy(&scores, g);
                rows += 1;
            }
        }
        total / rows as f64
    }
}
