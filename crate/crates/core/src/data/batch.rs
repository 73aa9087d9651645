use super::ingest::{Behavior, UserRecord};
use super::vocab::PAD_ID;
use crate::error::{Error, Result};

/// Dense `[B, M, L]` view of a set of users.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub batch: usize,
    pub max_behaviors: usize,
    pub max_title_len: usize,
    /// `[B, M, L]` token ids, `PAD_ID` where empty.
    pub ids: Vec<u32>,
    /// `[B, M]`, 1 where a behavior exists.
    pub behavior_mask: Vec<u8>,
    /// `[B, M, L]`, 1 where a token exists.
    pub token_mask: Vec<u8>,
    /// `[B, M]` original position of each behavior (0 for padding).
    pub positions: Vec<usize>,
}

pub fn pad_batch(records: &[UserRecord], max_behaviors: usize, max_title_len: usize) -> Result<PaddedBatch> {
    if records.is_empty() {
        return Err(Error::Data("pad_batch needs at least one record".into()));
    }
    let (b, m, l) = (records.len(), max_behaviors, max_title_len);
    let mut out = PaddedBatch {
        batch: b,
        max_behaviors: m,
        max_title_len: l,
        ids: vec![PAD_ID; b * m * l],
        behavior_mask: vec![0; b * m],
        token_mask: vec![0; b * m * l],
        positions: vec![0; b * m],
    };
    for (i, rec) in records.iter().enumerate() {
        for (j, beh) in rec.behaviors.iter().take(m).enumerate() {
            out.behavior_mask[i * m + j] = 1;
            out.positions[i * m + j] = beh.position;
            for (t, &tok) in beh.tokens.iter().take(l).enumerate() {
                let at = (i * m + j) * l + t;
                out.ids[at] = tok;
                out.token_mask[at] = 1;
            }
        }
    }
    Ok(out)
}

impl PaddedBatch {
    /// Recovers the behavior sequences (token lists and positions) per user.
    pub fn unpad(&self) -> Vec<Vec<Behavior>> {
        let (m, l) = (self.max_behaviors, self.max_title_len);
        (0..self.batch)
            .map(|i| {
                (0..m)
                    .filter(|&j| self.behavior_mask[i * m + j] == 1)
                    .map(|j| Behavior {
                        tokens: (0..l)
                            .filter(|&t| self.token_mask[(i * m + j) * l + t] == 1)
                            .map(|t| self.ids[(i * m + j) * l + t])
                            .collect(),
                        position: self.positions[i * m + j],
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use proptest::prelude::*;

    use super::*;

    fn user(titles: Vec<Vec<u32>>) -> UserRecord {
        UserRecord {
            user_id: "u".into(),
            behaviors: titles
                .into_iter()
                .enumerate()
                .map(|(position, tokens)| Behavior { tokens, position })
                .collect(),
            labels: BTreeMap::new(),
        }
    }

    #[test]
    fn masks_and_padding() {
        let b = pad_batch(&[user(vec![vec![5, 6], vec![7]])], 4, 3).unwrap();
        assert_eq!(b.behavior_mask, vec![1, 1, 0, 0]);
        assert_eq!(&b.ids[..6], &[5, 6, 0, 7, 0, 0]);
        assert!(b.ids[6..].iter().all(|&x| x == PAD_ID));
        assert_eq!(&b.token_mask[..6], &[1, 1, 0, 1, 0, 0]);
        assert_eq!(&b.positions[..2], &[0, 1]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(pad_batch(&[], 4, 3).is_err());
    }

    proptest! {
        #[test]
        fn unpad_inverts_pad(
            users in prop::collection::vec(
                prop::collection::vec(prop::collection::vec(2u32..50, 1..6), 1..8),
                1..5,
            )
        ) {
            let records: Vec<UserRecord> = users.into_iter().map(user).collect();
            let b = pad_batch(&records, 8, 6).unwrap();
            let back = b.unpad();
            for (rec, got) in records.iter().zip(&back) {
                prop_assert_eq!(&rec.behaviors, got);
            }
        }
    }
}
