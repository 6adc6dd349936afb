//! Byte-level tokenization, corpora and deterministic minibatches.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::hex;
use crate::rng::{domain, Rng};

/// Ids 0..=255 are raw bytes.
pub const PAD: u16 = 256;
pub const BOS: u16 = 257;
pub const EOS: u16 = 258;
pub const VOCAB_SIZE: usize = 259;
pub const NUM_SPECIALS: usize = 3;

/// Fraction of tokens in the training split.
pub const TRAIN_FRACTION: f64 = 0.9;

const CORPUS_MAGIC: &[u8; 4] = b"DLCP";
const CORPUS_VERSION: u32 = 1;

/// Byte-level tokenization: one id per byte, total and bijective.
pub fn tokenize(bytes: &[u8]) -> Vec<u16> {
    bytes.iter().map(|&b| u16::from(b)).collect()
}

/// Inverse of [`tokenize`]; special ids are dropped.
pub fn detokenize(ids: &[u16]) -> Vec<u8> {
    ids.iter()
        .filter_map(|&id| u8::try_from(id).ok())
        .collect()
}

/// A tokenized corpus with a contiguous train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    tokens: Vec<u16>,
    split: usize,
    hash: String,
}

impl Corpus {
    /// Tokenizes `docs` in order, separating documents with [`EOS`]. The
    /// first [`TRAIN_FRACTION`] of the stream is the training split.
    pub fn from_documents(name: &str, docs: &[(String, Vec<u8>)]) -> Result<Self> {
        let mut h = Sha256::new();
        let mut tokens = Vec::new();
        for (i, (doc_name, bytes)) in docs.iter().enumerate() {
            h.update((doc_name.len() as u64).to_le_bytes());
            h.update(doc_name.as_bytes());
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
            if i > 0 {
                tokens.push(EOS);
            }
            tokens.extend(tokenize(bytes));
        }
        if tokens.is_empty() {
            return Err(Error::Data(format!("corpus {name} is empty")));
        }
        let split = ((tokens.len() as f64) * TRAIN_FRACTION).round() as usize;
        Self::from_parts(name, tokens, split, hex(&h.finalize()))
    }

    pub fn from_text(name: &str, text: &str) -> Result<Self> {
        Self::from_documents(name, &[(name.to_string(), text.as_bytes().to_vec())])
    }

    fn from_parts(name: &str, tokens: Vec<u16>, split: usize, hash: String) -> Result<Self> {
        if split > tokens.len() {
            return Err(Error::Data(format!(
                "split {split} beyond corpus length {}",
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary")));
        }
        Ok(Self {
            name: name.to_string(),
            tokens,
            split,
            hash,
        })
    }

    /// Reads every regular file in `dir`, sorted by file name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        let mut docs = Vec::new();
        for path in entries {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            docs.push((name, bytes));
        }
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        Self::from_documents(&name, &docs)
    }

    /// Loads a `corpus.bin` cache, a directory of text files, or a single
    /// text file, by inspecting `path`.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            return Self::from_dir(path);
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(CORPUS_MAGIC) {
            Self::decode(&bytes)
        } else {
            let name = path
                .file_stem()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "corpus".into());
            Self::from_documents(&name, &[(name.clone(), bytes)])
        }
    }

    /// Keeps the first `n` tokens (all of them when `n == 0` or the corpus
    /// is shorter) and re-splits.
    pub fn truncated(self, n: usize) -> Result<Self> {
        if n == 0 || n >= self.tokens.len() {
            return Ok(self);
        }
        let mut tokens = self.tokens;
        tokens.truncate(n);
        let split = ((n as f64) * TRAIN_FRACTION).round() as usize;
        Self::from_parts(&self.name, tokens, split, self.hash)
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn train(&self) -> &[u16] {
        &self.tokens[..self.split]
    }

    pub fn val(&self) -> &[u16] {
        &self.tokens[self.split..]
    }

    /// Token index ranges `(train, val)`.
    pub fn split_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        (0..self.split, self.split..self.tokens.len())
    }

    /// SHA-256 of the exact source bytes and document names.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Binary cache: magic `DLCP`, u32 version, u32 vocab size, u32 special
    /// count, 32-byte hash, u64 token count, u64 split offset, u32 name
    /// length + UTF-8 name, then u16 tokens. All little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.name.len() + 2 * self.tokens.len());
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        out.extend_from_slice(&(VOCAB_SIZE as u32).to_le_bytes());
        out.extend_from_slice(&(NUM_SPECIALS as u32).to_le_bytes());
        let mut hash = [0u8; 32];
        for (i, b) in hash.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.hash[2 * i..2 * i + 2], 16).unwrap_or(0);
        }
        out.extend_from_slice(&hash);
        out.extend_from_slice(&(self.tokens.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.split as u64).to_le_bytes());
        out.extend_from_slice(&(self.name.len() as u32).to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        for &t in &self.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Data(format!("corpus cache: {why}"));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated"))? != CORPUS_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != CORPUS_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let vocab = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let specials = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        if vocab != VOCAB_SIZE || specials != NUM_SPECIALS {
            return Err(bad(&format!("vocabulary {vocab}/{specials} not supported")));
        }
        let hash = hex(r.take(32).ok_or_else(|| bad("truncated"))?);
        let len = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let split = r.u64().ok_or_else(|| bad("truncated"))? as usize;
        let name_len = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let name = String::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated"))?.to_vec())
            .map_err(|_| bad("name is not UTF-8"))?;
        let raw = r.take(2 * len).ok_or_else(|| bad("truncated token array"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let tokens = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::from_parts(&name, tokens, split, hash)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    RandomOffset,
    SequentialChunks,
}

/// Minibatch sampling plan. The batch at step `t` is a pure function of
/// `(seed, t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchPlan {
    pub seed: u64,
    pub context_len: usize,
    pub batch_size: usize,
    pub sampling: Sampling,
}

/// Inputs and next-token targets, both `[batch, seq]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

fn check_size(len: usize, ctx: usize) -> Result<()> {
    if len <= ctx + 1 {
        return Err(Error::Data(format!(
            "token stream of {len} tokens too small for context {ctx}: need at least {}",
            ctx + 2
        )));
    }
    Ok(())
}

impl BatchPlan {
    /// Start offset of sample `b` at step `t` in a stream of `len` tokens.
    pub fn offset(&self, len: usize, t: u64, b: usize) -> Result<usize> {
        let ctx = self.context_len;
        check_size(len, ctx)?;
        let n = (len - ctx) as u64;
        Ok(match self.sampling {
            Sampling::RandomOffset => {
                Rng::keyed(self.seed, &[domain::BATCH, t, b as u64]).below(n) as usize
            }
            Sampling::SequentialChunks => {
                let i = t * self.batch_size as u64 + b as u64;
                ((i * ctx as u64) % n) as usize
            }
        })
    }

    pub fn batch(&self, tokens: &[u16], t: u64) -> Result<Batch> {
        let offsets = (0..self.batch_size)
            .map(|b| self.offset(tokens.len(), t, b))
            .collect::<Result<Vec<_>>>()?;
        Ok(window_batch(tokens, &offsets, self.context_len))
    }
}

/// Batch made of the windows starting at `offsets`.
pub fn window_batch(tokens: &[u16], offsets: &[usize], ctx: usize) -> Batch {
    let mut inputs = Vec::with_capacity(offsets.len() * ctx);
    let mut targets = Vec::with_capacity(offsets.len() * ctx);
    for &o in offsets {
        inputs.extend(tokens[o..o + ctx].iter().map(|&t| t as usize));
        targets.extend(tokens[o + 1..o + ctx + 1].iter().map(|&t| t as usize));
    }
    Batch {
        inputs,
        targets,
        batch: offsets.len(),
        seq: ctx,
    }
}

/// Training batch at step `t`.
pub fn make_batches(corpus: &Corpus, plan: &BatchPlan, t: u64) -> Result<Batch> {
    plan.batch(corpus.train(), t)
}

/// Fixed evaluation batches: consecutive non-overlapping windows over
/// `tokens`, at most `max_windows` of them, grouped `batch_size` at a time.
pub fn eval_batches(
    tokens: &[u16],
    ctx: usize,
    batch_size: usize,
    max_windows: usize,
) -> Result<Vec<Batch>> {
    check_size(tokens.len(), ctx)?;
    let offsets: Vec<usize> = (0..)
        .map(|i| i * ctx)
        .take_while(|&o| o + ctx < tokens.len())
        .take(max_windows.max(1))
        .collect();
    Ok(offsets
        .chunks(batch_size.max(1))
        .map(|chunk| window_batch(tokens, chunk, ctx))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert!(tokenize(b"").is_empty());
        assert_eq!(tokenize(b"AB"), vec![65, 66]);
        assert_eq!(detokenize(&tokenize("héllo".as_bytes())), "héllo".as_bytes());
    }

    #[test]
    fn shift_by_one() {
        let tokens: Vec<u16> = (0..10).collect();
        let b = window_batch(&tokens, &[2], 4);
        assert_eq!(b.inputs, vec![2, 3, 4, 5]);
        assert_eq!(b.targets, vec![3, 4, 5, 6]);
    }

    #[test]
    fn too_small_is_a_sizing_error() {
        let plan = BatchPlan {
            seed: 0,
            context_len: 8,
            batch_size: 1,
            sampling: Sampling::RandomOffset,
        };
        let err = plan.batch(&[1; 9], 0).unwrap_err();
        assert!(err.to_string().contains("at least 10"), "{err}");
        assert!(plan.batch(&[1; 10], 0).is_ok());
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let c = Corpus::from_text("t", &"abcdefghij".repeat(10)).unwrap();
        let (tr, va) = c.split_ranges();
        assert_eq!(tr.end, va.start);
        assert_eq!(va.end, c.tokens().len());
        assert_eq!(tr.len(), 90);
        assert_eq!(c.train().len() + c.val().len(), c.tokens().len());
    }

    #[test]
    fn eval_windows_stay_inside_the_stream() {
        let tokens: Vec<u16> = (0..50).collect();
        let batches = eval_batches(&tokens, 8, 2, 100).unwrap();
        let windows: usize = batches.iter().map(|b| b.batch).sum();
        assert_eq!(windows, 6); // offsets 0, 8, .., 40 (40 + 8 < 50)
        assert_eq!(*batches.last().unwrap().targets.last().unwrap(), 48);
    }

    #[test]
    fn corpus_cache_round_trip_and_corruption() {
        let docs = vec![
            ("a.txt".to_string(), b"first doc".to_vec()),
            ("b.txt".to_string(), b"second".to_vec()),
        ];
        let c = Corpus::from_documents("pair", &docs).unwrap();
        assert_eq!(c.tokens()[9], EOS);
        let bytes = c.encode();
        assert_eq!(Corpus::decode(&bytes).unwrap(), c);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Corpus::decode(&bad).is_err());
        assert!(Corpus::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
