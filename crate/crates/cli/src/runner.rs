//! Shared harness plumbing: data sources, evaluation passes, and the
//! checkpoint-directory lock.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use latseq::bottleneck::Mode;
use latseq::data::{batch, load_tsv, strip_pad, EncodedBatch, TaskGen, Vocab};
use latseq::model::{
    token_accuracy, DecodeMode, DecodeStats, DecoderFeed, LengthMode,
};
use latseq::rng::CounterRng;
use latseq::tensor::Graph;

use crate::checkpoint::TrainState;
use crate::config::{LengthModeCfg, RunConfig};

/// Indices far above any training step so synthetic eval data never overlaps
/// the training stream.
const EVAL_BASE: u64 = 1 << 40;

pub enum DataSource {
    Synthetic { gen: TaskGen, vocab: Vocab },
    File { pairs: Vec<(Vec<u32>, Vec<u32>)>, order: Vec<usize>, vocab: Vocab },
}

impl DataSource {
    /// Build the data source; for file corpora this also sizes the model
    /// vocabularies, so the RunConfig is taken mutably.
    pub fn new(cfg: &mut RunConfig) -> Result<DataSource> {
        match &cfg.data_path {
            None => Ok(DataSource::Synthetic {
                gen: TaskGen::new(cfg.task_spec())?,
                vocab: Vocab::synthetic(cfg.vocab_size),
            }),
            Some(path) => {
                let (vocab, pairs) = load_tsv(path, cfg.min_count)?;
                if pairs.is_empty() {
                    bail!("empty corpus at {}", path.display());
                }
                for (x, y) in &pairs {
                    if x.len() + 1 > cfg.model.max_src_len || y.len() + 1 > cfg.model.max_tgt_len {
                        bail!(
                            "corpus sequence longer than configured maxima \
                             ({} source / {} target tokens)",
                            cfg.model.max_src_len - 1,
                            cfg.model.max_tgt_len - 1
                        );
                    }
                }
                let mut order: Vec<usize> = (0..pairs.len()).collect();
                CounterRng::new(cfg.seed, 0x0D0E).shuffle(&mut order);
                cfg.model.src_vocab = vocab.len();
                cfg.model.tgt_vocab = vocab.len();
                Ok(DataSource::File { pairs, order, vocab })
            }
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            DataSource::Synthetic { vocab, .. } => vocab,
            DataSource::File { vocab, .. } => vocab,
        }
    }

    /// Pairs for one training step; a pure function of (seed, step).
    pub fn train_pairs(&self, step: u64, n: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
        match self {
            DataSource::Synthetic { gen, .. } => gen.take(step * n as u64, n),
            DataSource::File { pairs, order, .. } => (0..n)
                .map(|i| {
                    let idx = order[(step as usize * n + i) % order.len()];
                    pairs[idx].clone()
                })
                .collect(),
        }
    }

    pub fn eval_pairs(&self, n: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
        match self {
            DataSource::Synthetic { gen, .. } => gen.take(EVAL_BASE, n),
            DataSource::File { pairs, order, .. } => (0..n.min(order.len()))
                .map(|i| pairs[order[order.len() - 1 - i]].clone())
                .collect(),
        }
    }

    pub fn train_batch(&self, cfg: &RunConfig, step: u64) -> Result<EncodedBatch> {
        Ok(batch(
            &self.train_pairs(step, cfg.batch_size),
            cfg.model.compression(),
            cfg.model.max_tgt_len,
        )?)
    }
}

/// Eval-mode reconstruction over a pair set: mean l_r (== log-perplexity) and
/// per-slice usage histograms of the codes.
pub fn eval_reconstruction(
    state: &TrainState,
    cfg: &RunConfig,
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<(f64, Vec<Vec<u64>>)> {
    let k_prime = state.lt.bottleneck.k_prime();
    let n_d = state.lt.bottleneck.n_d();
    let mut hist = vec![vec![0u64; k_prime]; n_d];
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let b = batch(chunk, cfg.model.compression(), cfg.model.max_tgt_len)?;
        let mut g = Graph::new();
        let out = state.lt.recon_forward(
            &mut g,
            &b,
            Mode::Eval,
            DecoderFeed::Latents,
            cfg.model.temperature,
            None,
        )?;
        total += g.values(out.l_r)[0];
        batches += 1;
        for row in out.slice_indices.chunks_exact(n_d) {
            for (i, &idx) in row.iter().enumerate() {
                hist[i][idx as usize] += 1;
            }
        }
    }
    Ok((total / batches.max(1) as f64, hist))
}

/// Average teacher-forced latent-prediction loss over a pair set.
pub fn eval_lp(state: &TrainState, cfg: &RunConfig, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in pairs.chunks(cfg.batch_size.max(1)) {
        let b = batch(chunk, cfg.model.compression(), cfg.model.max_tgt_len)?;
        let mut g = Graph::new();
        let out = state.lt.recon_forward(
            &mut g,
            &b,
            Mode::Eval,
            DecoderFeed::Latents,
            cfg.model.temperature,
            None,
        )?;
        let (l_lp, _) = state.lt.lp_forward_loss(&mut g, &b, &out.slice_indices, out.m)?;
        total += g.values(l_lp)[0];
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Full-pipeline decode of the given sources in batches; returns outputs and
/// accumulated instrumentation.
pub fn pipeline_decode(
    state: &TrainState,
    cfg: &RunConfig,
    sources: &[Vec<u32>],
    oracle_refs: Option<&[Vec<u32>]>,
    batch_size: usize,
    mode: DecodeMode,
    seed: u64,
) -> Result<(Vec<Vec<u32>>, DecodeStats)> {
    let mut rng = CounterRng::new(seed, 0xDEC0);
    let mut stats = DecodeStats::default();
    let mut outputs = Vec::with_capacity(sources.len());
    let c = cfg.model.compression();
    for (chunk_idx, chunk) in sources.chunks(batch_size.max(1)).enumerate() {
        let lengths = match (cfg.length_mode, oracle_refs) {
            (LengthModeCfg::Oracle, Some(refs)) => {
                let base = chunk_idx * batch_size;
                LengthMode::Oracle(
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(i, _)| (refs[base + i].len() + 1).div_ceil(c).max(1))
                        .collect(),
                )
            }
            _ => LengthMode::Predicted,
        };
        let out = state
            .lt
            .full_decode(chunk, &lengths, mode, &mut rng, &mut stats)?;
        outputs.extend(out);
    }
    Ok((outputs, stats))
}

/// Decode accuracy of the full pipeline against references.
pub fn pipeline_accuracy(
    state: &TrainState,
    cfg: &RunConfig,
    pairs: &[(Vec<u32>, Vec<u32>)],
    batch_size: usize,
) -> Result<f64> {
    let sources: Vec<Vec<u32>> = pairs.iter().map(|(x, _)| x.clone()).collect();
    let refs: Vec<Vec<u32>> = pairs.iter().map(|(_, y)| y.clone()).collect();
    let (outputs, _) = pipeline_decode(
        state,
        cfg,
        &sources,
        Some(&refs),
        batch_size,
        DecodeMode::Greedy,
        cfg.seed,
    )?;
    // compare against reference plus its eos terminator
    let refs_with_eos: Vec<Vec<u32>> = refs
        .iter()
        .map(|y| {
            let mut v = y.clone();
            v.push(latseq::data::EOS);
            v
        })
        .collect();
    let outputs_with_eos: Vec<Vec<u32>> = outputs
        .iter()
        .map(|y| {
            let mut v = y.clone();
            v.push(latseq::data::EOS);
            v
        })
        .collect();
    Ok(token_accuracy(&outputs_with_eos, &refs_with_eos))
}

/// In-memory training run (no checkpoints or metrics files); used by sweeps
/// and tests.
pub fn train_fresh(cfg: &RunConfig, data: &DataSource) -> Result<TrainState> {
    use latseq::model::{ArBaseline, LatentTransformer};
    use latseq::train::Trainer;
    let lt = LatentTransformer::new(cfg.model.clone())?;
    let baseline = cfg.baseline.then(|| ArBaseline::new(&cfg.model));
    let trainer = Trainer::new(cfg.lr, cfg.seed, cfg.steps);
    let mut state = TrainState { lt, baseline, trainer, step: 0 };
    while state.step < cfg.steps {
        let b = data.train_batch(cfg, state.step)?;
        state
            .trainer
            .step(&mut state.lt, state.baseline.as_mut(), &b, state.step)?;
        state.step += 1;
    }
    Ok(state)
}

/// Exclusive training lock on an output directory. The lock file is removed
/// on drop; a stale lock after a crash must be removed by hand.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another training process \
                     (remove {} if that process is gone)",
                    dir.display(),
                    path.display()
                )
            }
            Err(e) => Err(e).context("creating lock file"),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        std::fs::remove_file(&self.path).ok();
    }
}

/// Parse one source sequence per line using the run's vocabulary.
pub fn read_source_lines(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let id = vocab
                .get(tok)
                .with_context(|| format!("line {}: unknown token '{tok}'", lineno + 1))?;
            row.push(id);
        }
        out.push(row);
    }
    Ok(out)
}

/// Reference targets, one per line (may be used with [`read_source_lines`]).
pub fn read_reference_lines(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<u32>>> {
    read_source_lines(path, vocab)
}

pub fn detokenize_all(vocab: &Vocab, rows: &[Vec<u32>]) -> Vec<String> {
    rows.iter()
        .map(|r| {
            let clean = strip_pad(r);
            vocab.detokenize(&clean)
        })
        .collect()
}
