//! Spatial indexing: the `i`-th memorized sample of class `c` lives at
//! `code(i) + E(c)` in the transposed model's input space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the within-class index `i` is spelled out as digits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    /// reflected n-ary Gray code: neighbours differ by ±1 in one digit
    #[default]
    Gray,
    /// plain base-n digits
    Nary,
}

/// Per-class offset `E(c)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingScheme {
    /// `n · e_c`; needs `c < d`
    #[default]
    NHot,
    /// seeded draw from `N(0, n² I)`
    Random,
    /// no offset; the code then runs over one index shared by all classes
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexerConfig {
    pub base: usize,
    pub code_length: usize,
    #[serde(default)]
    pub code: CodeKind,
    #[serde(default)]
    pub embedding: EmbeddingScheme,
    #[serde(default)]
    pub seed: u64,
}

/// One entry of [`SpatialIndexer::enumerate`].
#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub index: usize,
    pub class: usize,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialIndexer {
    config: IndexerConfig,
}

fn capacity(base: usize, len: usize) -> Option<usize> {
    base.checked_pow(u32::try_from(len).ok()?)
}

/// Base-`n` digits of `i`, most significant first.
pub fn nary_encode(i: usize, base: usize, len: usize) -> Result<Vec<u8>> {
    check_code(i, base, len)?;
    let mut digits = vec![0u8; len];
    let mut rest = i;
    for d in digits.iter_mut().rev() {
        *d = (rest % base) as u8;
        rest /= base;
    }
    Ok(digits)
}

fn check_code(i: usize, base: usize, len: usize) -> Result<()> {
    if !(2..=256).contains(&base) || len == 0 {
        return Err(Error::Parameter(format!(
            "code base must be in 2..=256 and length positive, got base {base}, length {len}"
        )));
    }
    match capacity(base, len) {
        Some(cap) if i >= cap => Err(Error::Capacity(format!(
            "index {i} does not fit {len} digits of base {base} ({cap} codes)"
        ))),
        _ => Ok(()),
    }
}

/// Reflected `n`-ary Gray code of `i`, most significant digit first.
///
/// The sequence for `d` digits walks the top digit `0..n`, running the
/// `(d-1)`-digit sequence forwards under even top digits and backwards under
/// odd ones; for `n = 2` this is the usual `i ^ (i >> 1)`.
pub fn gray_encode(i: usize, base: usize, len: usize) -> Result<Vec<u8>> {
    let digits = nary_encode(i, base, len)?;
    let mut out = Vec::with_capacity(len);
    let mut reversed = false;
    for &d in &digits {
        let g = if reversed { base as u8 - 1 - d } else { d };
        out.push(g);
        // each odd digit flips the direction of everything below it
        reversed ^= g % 2 == 1;
    }
    Ok(out)
}

impl SpatialIndexer {
    pub fn new(config: IndexerConfig) -> Result<Self> {
        check_code(0, config.base, config.code_length)?;
        Ok(Self { config })
    }

    /// Gray code with n-hot class offsets.
    pub fn n_hot(base: usize, code_length: usize) -> Result<Self> {
        Self::new(IndexerConfig {
            base,
            code_length,
            code: CodeKind::Gray,
            embedding: EmbeddingScheme::NHot,
            seed: 0,
        })
    }

    pub fn config(&self) -> &IndexerConfig {
        &self.config
    }

    pub fn base(&self) -> usize {
        self.config.base
    }

    pub fn code_length(&self) -> usize {
        self.config.code_length
    }

    /// Codes available per class (saturating for very long codes).
    pub fn capacity(&self) -> usize {
        capacity(self.config.base, self.config.code_length).unwrap_or(usize::MAX)
    }

    pub fn code(&self, i: usize) -> Result<Vec<u8>> {
        match self.config.code {
            CodeKind::Gray => gray_encode(i, self.config.base, self.config.code_length),
            CodeKind::Nary => nary_encode(i, self.config.base, self.config.code_length),
        }
    }

    /// `E(c)`.
    pub fn class_embedding(&self, class: usize) -> Result<Vec<f32>> {
        let (n, d) = (self.config.base, self.config.code_length);
        match self.config.embedding {
            EmbeddingScheme::NHot => {
                if class >= d {
                    return Err(Error::SchemeCapacity { class, dim: d });
                }
                let mut e = vec![0.0; d];
                e[class] = n as f32;
                Ok(e)
            }
            EmbeddingScheme::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(class as u64);
                let normal = Normal::new(0.0, n as f64).expect("positive std");
                Ok((0..d).map(|_| normal.sample(&mut rng) as f32).collect())
            }
            EmbeddingScheme::None => Ok(vec![0.0; d]),
        }
    }

    /// `I(i, c) = code(i) + E(c)`.
    pub fn index(&self, i: usize, class: usize) -> Result<Vec<f32>> {
        let code = self.code(i)?;
        let emb = self.class_embedding(class)?;
        Ok(code.iter().zip(&emb).map(|(&g, &e)| g as f32 + e).collect())
    }

    /// Index vectors for `counts[c]` samples of each class `c`, classes
    /// ascending and `i` ascending within a class. Without class offsets the
    /// code position continues across classes so that entries stay distinct.
    pub fn enumerate(&self, counts: &[usize]) -> Result<Vec<IndexEntry>> {
        let shared = self.config.embedding == EmbeddingScheme::None;
        let total: usize = counts.iter().sum();
        let cap = self.capacity();
        if shared && total > cap {
            return Err(Error::Capacity(format!("{total} samples exceed the {cap} shared codes")));
        }
        let mut out = Vec::with_capacity(total);
        let mut offset = 0;
        for (class, &count) in counts.iter().enumerate() {
            if count > cap {
                return Err(Error::Capacity(format!(
                    "class {class} has {count} samples but only {cap} codes exist"
                )));
            }
            if count == 0 {
                continue;
            }
            let emb = self.class_embedding(class)?;
            for i in 0..count {
                let code = self.code(offset + i)?;
                let vector = code.iter().zip(&emb).map(|(&g, &e)| g as f32 + e).collect();
                out.push(IndexEntry { index: i, class, vector });
            }
            if shared {
                offset += count;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_gray_matches_xor_rule() {
        for i in 0..32usize {
            let g = i ^ (i >> 1);
            let bits: Vec<u8> = (0..5).rev().map(|b| ((g >> b) & 1) as u8).collect();
            assert_eq!(gray_encode(i, 2, 5).unwrap(), bits);
        }
        assert_eq!(gray_encode(15, 2, 5).unwrap(), [0, 1, 0, 0, 0]);
        assert_eq!(gray_encode(16, 2, 5).unwrap(), [1, 1, 0, 0, 0]);
    }

    #[test]
    fn ternary_sequence_steps_by_one() {
        let seq: Vec<Vec<u8>> = (0..9).map(|i| gray_encode(i, 3, 2).unwrap()).collect();
        assert_eq!(
            seq,
            [[0, 0], [0, 1], [0, 2], [1, 2], [1, 1], [1, 0], [2, 0], [2, 1], [2, 2]]
        );
    }

    #[test]
    fn over_capacity() {
        assert!(matches!(gray_encode(32, 2, 5), Err(Error::Capacity(_))));
        assert!(matches!(nary_encode(9, 3, 2), Err(Error::Capacity(_))));
    }

    #[test]
    fn n_hot_embedding() {
        let ix = SpatialIndexer::n_hot(3, 3).unwrap();
        assert_eq!(ix.class_embedding(1).unwrap(), [0.0, 3.0, 0.0]);
        assert_eq!(ix.index(0, 0).unwrap(), [3.0, 0.0, 0.0]);
        assert!(matches!(ix.class_embedding(3), Err(Error::SchemeCapacity { class: 3, dim: 3 })));
    }

    #[test]
    fn random_embedding_is_seeded() {
        let cfg = IndexerConfig {
            base: 2,
            code_length: 6,
            code: CodeKind::Gray,
            embedding: EmbeddingScheme::Random,
            seed: 11,
        };
        let a = SpatialIndexer::new(cfg.clone()).unwrap();
        let b = SpatialIndexer::new(cfg).unwrap();
        assert_eq!(a.class_embedding(4).unwrap(), b.class_embedding(4).unwrap());
        assert_ne!(a.class_embedding(4).unwrap(), a.class_embedding(5).unwrap());
    }

    #[test]
    fn enumerate_orders_by_class_then_index() {
        let ix = SpatialIndexer::n_hot(2, 3).unwrap();
        let e = ix.enumerate(&[2]).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[0].index, e[0].class, e[0].vector.clone()), (0, 0, vec![2.0, 0.0, 0.0]));
        assert_eq!((e[1].index, e[1].class, e[1].vector.clone()), (1, 0, vec![2.0, 0.0, 1.0]));
        assert!(ix.enumerate(&[]).unwrap().is_empty());
        assert!(matches!(ix.enumerate(&[0, 9]), Err(Error::Capacity(_))));
    }

    #[test]
    fn shared_code_keeps_entries_distinct() {
        let ix = SpatialIndexer::new(IndexerConfig {
            base: 2,
            code_length: 3,
            code: CodeKind::Nary,
            embedding: EmbeddingScheme::None,
            seed: 0,
        })
        .unwrap();
        let e = ix.enumerate(&[2, 2]).unwrap();
        assert_eq!(e[2].vector, [0.0, 1.0, 0.0]);
        assert_eq!(e[2].index, 0);
        assert!(ix.enumerate(&[5, 4]).is_err());
    }
}
