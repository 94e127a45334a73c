//! Synthetic sequence tasks and file-based corpora.
//!
//! Tokens are u32 ids with three reserved values: pad, bos, eos. The copy,
//! reverse and cipher generators are deterministic given their seed; cipher
//! applies a fixed seeded permutation per token, a minimal stand-in for
//! "translation" with a learnable deterministic mapping.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::CounterRng;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const RESERVED: u32 = 3;

/// Token <-> id maps with fixed reserved ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in ["<pad>", "<bos>", "<eos>"] {
            v.intern(t);
        }
        v
    }

    /// Synthetic vocabulary "t3".."tN" for generated tasks.
    pub fn synthetic(size: usize) -> Self {
        let mut v = Vocab::new();
        for i in RESERVED as usize..size {
            v.intern(&format!("t{i}"));
        }
        v
    }

    pub fn intern(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS || id == PAD {
                break;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Cipher,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "cipher" => Ok(TaskKind::Cipher),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Total vocabulary size including the three reserved ids.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn content_tokens(&self) -> usize {
        self.vocab_size - RESERVED as usize
    }

    /// The fixed seeded permutation over content ids (cipher task).
    pub fn permutation(&self) -> Result<Vec<u32>> {
        let n = self.content_tokens();
        if n < 2 {
            return Err(Error::VocabTooSmall { vocab: n, task: "cipher" });
        }
        let mut perm: Vec<u32> = (0..n as u32).collect();
        let mut rng = CounterRng::new(self.seed, 0xC1FE);
        rng.shuffle(&mut perm);
        Ok(perm)
    }
}

/// Deterministic stream of (x, y) pairs; pair i depends only on (seed, i).
pub struct TaskGen {
    spec: TaskSpec,
    perm: Option<Vec<u32>>,
}

impl TaskGen {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        if spec.content_tokens() == 0 {
            return Err(Error::VocabTooSmall { vocab: 0, task: "generate" });
        }
        let perm = match spec.kind {
            TaskKind::Cipher => Some(spec.permutation()?),
            _ => None,
        };
        Ok(TaskGen { spec, perm })
    }

    pub fn pair(&self, index: u64) -> (Vec<u32>, Vec<u32>) {
        let mut rng = CounterRng::new(self.spec.seed, 0xDA7A).derive(index);
        let len = self.spec.min_len
            + rng.below(self.spec.max_len - self.spec.min_len + 1);
        let content = self.spec.content_tokens() as u64;
        let x: Vec<u32> = (0..len)
            .map(|_| RESERVED + (rng.next_u64() % content) as u32)
            .collect();
        let y = match self.spec.kind {
            TaskKind::Copy => x.clone(),
            TaskKind::Reverse => x.iter().rev().copied().collect(),
            TaskKind::Cipher => {
                let perm = self.perm.as_ref().unwrap();
                x.iter().map(|&t| RESERVED + perm[(t - RESERVED) as usize]).collect()
            }
        };
        (x, y)
    }

    pub fn take(&self, start: u64, count: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
        (0..count as u64).map(|i| self.pair(start + i)).collect()
    }
}

/// One padded batch. `x` and `y` are row-major b x len id matrices; masks are
/// true at real positions (tokens and the terminating eos).
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    pub b: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub x: Vec<u32>,
    pub y: Vec<u32>,
    pub x_mask: Vec<bool>,
    pub y_mask: Vec<bool>,
}

impl EncodedBatch {
    pub fn x_row(&self, i: usize) -> &[u32] {
        &self.x[i * self.src_len..(i + 1) * self.src_len]
    }

    pub fn y_row(&self, i: usize) -> &[u32] {
        &self.y[i * self.tgt_len..(i + 1) * self.tgt_len]
    }

    /// Real length of target row i (tokens + eos).
    pub fn y_len(&self, i: usize) -> usize {
        self.y_mask[i * self.tgt_len..(i + 1) * self.tgt_len]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// Append eos, pad targets to a shared multiple of `c_factor`, pad sources to
/// the batch maximum. Sequences longer than `max_len` (after eos) are a hard
/// error, never silently truncated.
pub fn batch(pairs: &[(Vec<u32>, Vec<u32>)], c_factor: usize, max_len: usize) -> Result<EncodedBatch> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for (x, y) in pairs {
        if x.len() + 1 > max_len || y.len() + 1 > max_len {
            return Err(Error::SequenceTooLong {
                len: x.len().max(y.len()) + 1,
                max: max_len,
            });
        }
    }
    let b = pairs.len();
    let src_len = pairs.iter().map(|(x, _)| x.len() + 1).max().unwrap();
    let raw_tgt = pairs.iter().map(|(_, y)| y.len() + 1).max().unwrap();
    let tgt_len = raw_tgt.div_ceil(c_factor) * c_factor;

    let mut out = EncodedBatch {
        b,
        src_len,
        tgt_len,
        x: vec![PAD; b * src_len],
        y: vec![PAD; b * tgt_len],
        x_mask: vec![false; b * src_len],
        y_mask: vec![false; b * tgt_len],
    };
    for (i, (x, y)) in pairs.iter().enumerate() {
        for (j, &t) in x.iter().enumerate() {
            out.x[i * src_len + j] = t;
            out.x_mask[i * src_len + j] = true;
        }
        out.x[i * src_len + x.len()] = EOS;
        out.x_mask[i * src_len + x.len()] = true;
        for (j, &t) in y.iter().enumerate() {
            out.y[i * tgt_len + j] = t;
            out.y_mask[i * tgt_len + j] = true;
        }
        out.y[i * tgt_len + y.len()] = EOS;
        out.y_mask[i * tgt_len + y.len()] = true;
    }
    Ok(out)
}

/// Strip padding back off: the inverse of [`batch`] for the target side.
pub fn strip_pad(row: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    for &t in row {
        if t == EOS || t == PAD {
            break;
        }
        out.push(t);
    }
    out
}

/// Load a whitespace-tokenized tab-separated parallel corpus, building a
/// shared vocabulary in first-occurrence order. Tokens below the frequency
/// cutoff map to an `<unk>` entry.
pub fn load_tsv(path: &Path, min_count: usize) -> Result<(Vocab, Vec<(Vec<u32>, Vec<u32>)>)> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut raw: Vec<(Vec<String>, Vec<String>)> = Vec::new();
    let mut freq: HashMap<String, usize> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let Some((src, tgt)) = line.split_once('\t') else {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "expected one tab separating source and target".into(),
            });
        };
        let xs: Vec<String> = src.split_whitespace().map(str::to_string).collect();
        let ys: Vec<String> = tgt.split_whitespace().map(str::to_string).collect();
        if xs.is_empty() || ys.is_empty() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "empty source or target side".into(),
            });
        }
        for t in xs.iter().chain(ys.iter()) {
            *freq.entry(t.clone()).or_insert(0) += 1;
        }
        raw.push((xs, ys));
    }
    let mut vocab = Vocab::new();
    let unk_id = vocab.intern("<unk>");
    for (xs, ys) in &raw {
        for t in xs.iter().chain(ys.iter()) {
            if freq[t] >= min_count {
                vocab.intern(t);
            }
        }
    }
    let lookup = |v: &Vocab, t: &str| v.get(t).unwrap_or(unk_id);
    let pairs = raw
        .iter()
        .map(|(xs, ys)| {
            (
                xs.iter().map(|t| lookup(&vocab, t)).collect(),
                ys.iter().map(|t| lookup(&vocab, t)).collect(),
            )
        })
        .collect();
    Ok((vocab, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            vocab_size: 16,
            min_len: 3,
            max_len: 9,
            seed: 7,
        }
    }

    #[test]
    fn copy_and_reverse_definitions() {
        let g = TaskGen::new(spec(TaskKind::Copy)).unwrap();
        let (x, y) = g.pair(0);
        assert_eq!(x, y);

        let g = TaskGen::new(spec(TaskKind::Reverse)).unwrap();
        let (x, y) = g.pair(0);
        let rev: Vec<u32> = x.iter().rev().copied().collect();
        assert_eq!(y, rev);
    }

    #[test]
    fn cipher_is_a_permutation_and_identity_perm_is_copy() {
        let g = TaskGen::new(spec(TaskKind::Cipher)).unwrap();
        let (x, y) = g.pair(3);
        assert_eq!(x.len(), y.len());
        // bijective on content ids: same multiset structure
        let perm = spec(TaskKind::Cipher).permutation().unwrap();
        let mut seen = perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..perm.len() as u32).collect::<Vec<_>>());
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(RESERVED + perm[(a - RESERVED) as usize], *b);
        }
    }

    #[test]
    fn generation_deterministic_under_seed() {
        let g1 = TaskGen::new(spec(TaskKind::Copy)).unwrap();
        let g2 = TaskGen::new(spec(TaskKind::Copy)).unwrap();
        assert_eq!(g1.take(0, 50), g2.take(0, 50));
    }

    #[test]
    fn batch_pads_to_multiple_of_c() {
        let pairs = vec![(vec![5u32; 13], vec![5u32; 13])];
        let b = batch(&pairs, 8, 64).unwrap();
        // 13 tokens + eos = 14, padded up to 16
        assert_eq!(b.tgt_len, 16);
        assert_eq!(b.y_len(0), 14);

        // already a multiple stays put
        let pairs = vec![(vec![5u32; 15], vec![5u32; 15])];
        let b = batch(&pairs, 8, 64).unwrap();
        assert_eq!(b.tgt_len, 16);
    }

    #[test]
    fn batch_strip_round_trip() {
        let g = TaskGen::new(spec(TaskKind::Reverse)).unwrap();
        let pairs = g.take(0, 6);
        let b = batch(&pairs, 4, 64).unwrap();
        for i in 0..b.b {
            assert_eq!(strip_pad(b.y_row(i)), pairs[i].1);
        }
    }

    #[test]
    fn batch_errors() {
        assert!(matches!(batch(&[], 4, 64), Err(Error::EmptyBatch)));
        let too_long = vec![(vec![5u32; 64], vec![5u32; 64])];
        assert!(matches!(
            batch(&too_long, 4, 64),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn tsv_parses_and_reports_line_numbers() {
        let dir = std::env::temp_dir().join(format!("latseq_tsv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let good = dir.join("good.tsv");
        writeln!(
            std::fs::File::create(&good).unwrap(),
            "a b\tc d\na b\tc d\ne\tf"
        )
        .unwrap();
        let (vocab, pairs) = load_tsv(&good, 1).unwrap();
        assert_eq!(pairs.len(), 3);
        assert_eq!(pairs[0].0.len(), 2);
        assert_eq!(pairs[0], pairs[1], "duplicate lines are allowed");
        assert_eq!(vocab.token(pairs[0].0[0]), "a");

        let bad = dir.join("bad.tsv");
        writeln!(std::fs::File::create(&bad).unwrap(), "a b\tc\nno tab here").unwrap();
        let err = load_tsv(&bad, 1).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn cipher_needs_at_least_two_content_tokens() {
        let s = TaskSpec {
            kind: TaskKind::Cipher,
            vocab_size: 4,
            min_len: 1,
            max_len: 2,
            seed: 0,
        };
        assert!(matches!(
            s.permutation(),
            Err(Error::VocabTooSmall { .. })
        ));
    }
}
