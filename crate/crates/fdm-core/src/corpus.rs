//! Byte-level corpora: tokenization, deterministic train/val split, and a
//! synthetic text generator for desk-scale experiments.
//!
//! Tokens 0..=255 are raw bytes; token 256 marks a document boundary, so
//! the LM vocab is 257. The split chunks the file into fixed-size
//! "documents", hashes each, sorts by hash and cuts at the requested
//! fraction — deterministic, content-addressed, and exact to within one
//! document.

use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{FdmError, Result};

pub const BYTE_VOCAB: usize = 256;
pub const DOC_SEP: usize = 256;
pub const LM_VOCAB: usize = 257;

/// Document chunk size for the hash split.
const DOC_BYTES: usize = 1024;

/// Byte-identity encoding.
pub fn encode(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn total_tokens(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn val_fraction(&self) -> f64 {
        self.val.len() as f64 / self.total_tokens() as f64
    }
}

/// Load a corpus file and split it by document hash.
pub fn load_corpus(path: &Path, val_fraction: f64) -> Result<Corpus> {
    let bytes = std::fs::read(path)
        .map_err(|e| FdmError::Corpus(format!("cannot read {}: {e}", path.display())))?;
    corpus_from_bytes(&bytes, val_fraction)
}

pub fn corpus_from_bytes(bytes: &[u8], val_fraction: f64) -> Result<Corpus> {
    if bytes.is_empty() {
        return Err(FdmError::Corpus("empty corpus".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(FdmError::Corpus(format!("val fraction {val_fraction} outside [0, 1)")));
    }
    let docs: Vec<&[u8]> = bytes.chunks(DOC_BYTES).collect();

    // Sort document indices by content hash (ties by index) and take the
    // leading fraction as validation.
    let mut order: Vec<(usize, [u8; 32])> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let mut h = Sha256::new();
            h.update(d);
            (i, h.finalize().into())
        })
        .collect();
    order.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    let n_val = ((docs.len() as f64) * val_fraction).round() as usize;
    let mut is_val = vec![false; docs.len()];
    for (i, _) in order.iter().take(n_val) {
        is_val[*i] = true;
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, doc) in docs.iter().enumerate() {
        let stream = if is_val[i] { &mut val } else { &mut train };
        if !stream.is_empty() {
            stream.push(DOC_SEP);
        }
        stream.extend(doc.iter().map(|&b| b as usize));
    }
    Ok(Corpus { train, val, vocab_size: LM_VOCAB })
}

/// Deterministic synthetic text: an order-2 Markov chain over lowercase
/// letters and space, with concentrated transitions so a small LM has real
/// structure to learn. Entropy sits near 2 bits/char.
pub fn generate_synthetic_corpus(seed: u64, n_bytes: usize) -> Vec<u8> {
    use rand::{Rng, SeedableRng};
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
    let n = ALPHABET.len();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    // For every 2-char context: three preferred successors with fixed mass,
    // remainder spread uniformly.
    let mut preferred = vec![[0usize; 3]; n * n];
    for slot in preferred.iter_mut() {
        for p in slot.iter_mut() {
            *p = rng.gen_range(0..n);
        }
    }
    let mass = [0.50, 0.25, 0.13];
    let tail = (1.0 - mass.iter().sum::<f64>()) / n as f64;

    let mut out = Vec::with_capacity(n_bytes);
    let (mut a, mut b) = (0usize, 1usize);
    for _ in 0..n_bytes {
        let ctx = a * n + b;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = None;
        for (k, &m) in mass.iter().enumerate() {
            acc += m;
            if u < acc {
                next = Some(preferred[ctx][k]);
                break;
            }
        }
        let next = next.unwrap_or_else(|| {
            let r = ((u - acc) / tail) as usize;
            r.min(n - 1)
        });
        out.push(ALPHABET[next]);
        a = b;
        b = next;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_identity_encoding() {
        assert_eq!(encode(b"ab"), vec![97, 98]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(corpus_from_bytes(&[], 0.1).is_err());
    }

    #[test]
    fn same_bytes_same_stream() {
        let data = generate_synthetic_corpus(3, 40_000);
        let a = corpus_from_bytes(&data, 0.1).unwrap();
        let b = corpus_from_bytes(&data, 0.1).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn val_fraction_within_one_percent_on_1mb() {
        let data = generate_synthetic_corpus(5, 1 << 20);
        let corpus = corpus_from_bytes(&data, 0.1).unwrap();
        assert!(
            (corpus.val_fraction() - 0.1).abs() < 0.01,
            "val fraction {}",
            corpus.val_fraction()
        );
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_sized() {
        let a = generate_synthetic_corpus(9, 10_000);
        let b = generate_synthetic_corpus(9, 10_000);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10_000);
        assert!(a.iter().all(|c| c.is_ascii_lowercase() || *c == b' '));
    }
}
