use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

pub fn detokenize(tokens: &[u32]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::TokenOutOfRange {
                token: t,
                vocab_size: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Reads a file and tokenizes it byte by byte.
pub fn ingest_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::invalid(format!("corpus {} is empty", path.display())));
    }
    let tokens = tokenize(&bytes);
    log::info!("corpus {}: {} tokens", path.display(), tokens.len());
    Ok(tokens)
}

/// Splits off the trailing `fraction` of a stream as a held-out slice.
pub fn split_holdout(tokens: &[u32], fraction: f64) -> Result<(&[u32], &[u32])> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "held-out fraction must be in [0, 1), got {fraction}"
        )));
    }
    let cut = tokens.len() - (tokens.len() as f64 * fraction).round() as usize;
    Ok(tokens.split_at(cut))
}

/// Target of the student at position `i` for offset `k`: `tokens[i + 1 + k]`,
/// or `None` past the end. `k = 0` is plain next-token prediction.
pub fn mtp_targets(tokens: &[u32], k: usize) -> Vec<Option<u32>> {
    (0..tokens.len())
        .map(|i| tokens.get(i + 1 + k).copied())
        .collect()
}

/// `batch_size` sequences of `seq_len` tokens laid out back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<u32>,
    pub batch_size: usize,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(tokens: Vec<u32>, batch_size: usize, seq_len: usize) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 || tokens.len() != batch_size * seq_len {
            return Err(Error::ShapeMismatch {
                op: "batch",
                left: vec![tokens.len()],
                right: vec![batch_size, seq_len],
            });
        }
        Ok(Batch {
            tokens,
            batch_size,
            seq_len,
        })
    }

    /// Windows starting at uniformly random offsets of `corpus`.
    pub fn sample<R: Rng + ?Sized>(
        corpus: &[u32],
        batch_size: usize,
        seq_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if corpus.len() < seq_len {
            return Err(Error::CorpusTooSmall {
                tokens: corpus.len(),
                required: seq_len,
            });
        }
        let mut tokens = Vec::with_capacity(batch_size * seq_len);
        for _ in 0..batch_size {
            let start = rng.random_range(0..=corpus.len() - seq_len);
            tokens.extend_from_slice(&corpus[start..start + seq_len]);
        }
        Batch::new(tokens, batch_size, seq_len)
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }

    /// Offset-`k` targets for every row, concatenated.
    pub fn targets(&self, k: usize) -> Vec<Option<u32>> {
        (0..self.batch_size)
            .flat_map(|b| mtp_targets(self.row(b), k))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bytes_are_tokens() {
        assert_eq!(tokenize(b"abc"), vec![97, 98, 99]);
        assert!(detokenize(&[256]).is_err());
    }

    #[test]
    fn one_mebibyte_is_that_many_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        std::fs::write(&path, vec![b'x'; 1 << 20]).unwrap();
        assert_eq!(ingest_corpus(&path).unwrap().len(), 1_048_576);
        std::fs::write(&path, b"").unwrap();
        assert!(ingest_corpus(&path).is_err());
        assert!(matches!(
            ingest_corpus(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn targets_shift_by_offset() {
        let t = [1, 2, 3, 4, 5];
        assert_eq!(
            mtp_targets(&t, 0),
            vec![Some(2), Some(3), Some(4), Some(5), None]
        );
        assert_eq!(
            mtp_targets(&t, 1),
            vec![Some(3), Some(4), Some(5), None, None]
        );
        assert_eq!(mtp_targets(&[1, 2], 3), vec![None, None]);
    }

    #[test]
    fn batch_targets_stay_within_rows() {
        let b = Batch::new(vec![1, 2, 3, 4, 5, 6], 2, 3).unwrap();
        assert_eq!(
            b.targets(0),
            vec![Some(2), Some(3), None, Some(5), Some(6), None]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let corpus: Vec<u32> = (0..50).collect();
        let s = Batch::sample(&corpus, 4, 10, &mut rng).unwrap();
        for b in 0..4 {
            let row = s.row(b);
            assert!(row.windows(2).all(|w| w[1] == w[0] + 1));
        }
        assert!(Batch::sample(&corpus[..5], 1, 10, &mut rng).is_err());
    }

    #[test]
    fn holdout_split() {
        let t: Vec<u32> = (0..100).collect();
        let (train, held) = split_holdout(&t, 0.1).unwrap();
        assert_eq!((train.len(), held.len()), (90, 10));
        assert!(split_holdout(&t, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..512)) {
            prop_assert_eq!(detokenize(&tokenize(&bytes)).unwrap(), bytes);
        }
    }
}
