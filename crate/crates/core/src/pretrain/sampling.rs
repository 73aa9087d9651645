use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::UserRecord;
use crate::error::{Error, Result};

/// A behavior identified by its owner and index in the owner's sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BehaviorRef {
    pub user: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MbpSample {
    pub user: usize,
    pub masked_index: usize,
    /// `P + 1` candidates, shuffled.
    pub candidates: Vec<BehaviorRef>,
    pub gold_index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NbpSample {
    pub user: usize,
    /// The first `n_inputs` behaviors form the input.
    pub n_inputs: usize,
    /// `K` candidate sets of `P + 1`; set `k` holds behavior `n_inputs + k`.
    pub candidates: Vec<Vec<BehaviorRef>>,
    pub gold_indices: Vec<usize>,
}

/// Users plus a flat index of every behavior for negative sampling.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
    pool: Vec<BehaviorRef>,
}

impl Corpus {
    pub fn new(users: Vec<UserRecord>) -> Self {
        let pool = users
            .iter()
            .enumerate()
            .flat_map(|(u, rec)| (0..rec.behaviors.len()).map(move |index| BehaviorRef { user: u, index }))
            .collect();
        Corpus { users, pool }
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn tokens(&self, r: BehaviorRef) -> &[u32] {
        &self.users[r.user].behaviors[r.index].tokens
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    /// `count` distinct behaviors of users other than `user`, uniform without
    /// replacement. Draws that hit `user` are resampled.
    pub fn sample_negatives<R: Rng>(&self, user: usize, count: usize, rng: &mut R) -> Result<Vec<BehaviorRef>> {
        let available = self.pool.len() - self.users[user].behaviors.len();
        if available < count {
            return Err(Error::Data(format!(
                "negative pool exhausted: need {count} behaviors from other users, have {available}"
            )));
        }
        let mut out: Vec<BehaviorRef> = Vec::with_capacity(count);
        while out.len() < count {
            let cand = self.pool[rng.gen_range(0..self.pool.len())];
            if cand.user != user && !out.contains(&cand) {
                out.push(cand);
            }
        }
        Ok(out)
    }
}

/// `gold` packed with `negatives` in a uniformly shuffled order.
fn pack<R: Rng>(gold: BehaviorRef, negatives: Vec<BehaviorRef>, rng: &mut R) -> (Vec<BehaviorRef>, usize) {
    let mut cands = negatives;
    cands.push(gold);
    cands.shuffle(rng);
    let gold_index = cands.iter().position(|&c| c == gold).expect("gold is present");
    (cands, gold_index)
}

/// Returns `Ok(None)` for users with fewer than two behaviors.
pub fn make_mbp_sample<R: Rng>(
    corpus: &Corpus,
    user: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Option<MbpSample>> {
    let n = corpus.users[user].behaviors.len();
    if n < 2 {
        return Ok(None);
    }
    let masked_index = rng.gen_range(0..n);
    let negs = corpus.sample_negatives(user, negatives, rng)?;
    let (candidates, gold_index) = pack(
        BehaviorRef {
            user,
            index: masked_index,
        },
        negs,
        rng,
    );
    Ok(Some(MbpSample {
        user,
        masked_index,
        candidates,
        gold_index,
    }))
}

/// Returns `Ok(None)` for users with at most `k` behaviors. The split point is
/// drawn uniformly from `1..=n-k` unless `split` is given.
pub fn make_nbp_sample<R: Rng>(
    corpus: &Corpus,
    user: usize,
    split: Option<usize>,
    k: usize,
    negatives: usize,
    rng: &mut R,
) -> Result<Option<NbpSample>> {
    let n = corpus.users[user].behaviors.len();
    if k == 0 {
        return Err(Error::Config("NBP needs K >= 1".into()));
    }
    if n < k + 1 {
        return Ok(None);
    }
    let n_inputs = match split {
        Some(s) if s == 0 || s + k > n => {
            return Err(Error::Contract(format!(
                "split {s} invalid for {n} behaviors and K={k}"
            )))
        }
        Some(s) => s,
        None => rng.gen_range(1..=n - k),
    };
    let mut candidates = Vec::with_capacity(k);
    let mut gold_indices = Vec::with_capacity(k);
    for i in 0..k {
        let negs = corpus.sample_negatives(user, negatives, rng)?;
        let (c, g) = pack(
            BehaviorRef {
                user,
                index: n_inputs + i,
            },
            negs,
            rng,
        );
        candidates.push(c);
        gold_indices.push(g);
    }
    Ok(Some(NbpSample {
        user,
        n_inputs,
        candidates,
        gold_indices,
    }))
}

/// Which task an RNG stream serves.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Mbp = 1,
    Nbp = 2,
    Order = 3,
}

/// Deterministic per-user RNG: FNV-1a over (seed, user id, epoch, stream).
pub fn sample_rng(seed: u64, user_id: &str, epoch: usize, stream: Stream) -> ChaCha8Rng {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    };
    feed(&seed.to_le_bytes());
    feed(user_id.as_bytes());
    feed(&[0xff]);
    feed(&(epoch as u64).to_le_bytes());
    feed(&[stream as u8]);
    ChaCha8Rng::seed_from_u64(h)
}
