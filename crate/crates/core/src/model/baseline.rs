//! Token-level autoregressive encoder-decoder: the latency yardstick
//! (one sequential invocation per output token) and the scorer for noisy
//! parallel decoding.

use crate::data::{EOS, PAD};
use crate::error::Result;
use crate::rng::CounterRng;
use crate::tensor::{Graph, ParamSet, Tensor};

use super::config::ModelConfig;
use super::layers::{DecBlock, Embedding, Linear, Norm, PosEmbedding, SourceEncoder, StartShift};

pub struct ArBaseline {
    pub params: ParamSet,
    vocab: usize,
    src_enc: SourceEncoder,
    tgt_emb: Embedding,
    shift: StartShift,
    pos: PosEmbedding,
    blocks: Vec<DecBlock>,
    norm: Norm,
    out: Linear,
}

impl ArBaseline {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut params = ParamSet::new();
        let mut rng = CounterRng::new(cfg.seed, 0xBA5E);
        let d = cfg.d_model;
        let ff = cfg.ff_mult * d;
        let src_enc = SourceEncoder::new(
            "bl.src",
            cfg.src_vocab,
            d,
            cfg.heads,
            ff,
            cfg.enc_layers,
            cfg.max_src_len,
            &mut params,
            &mut rng,
        );
        let tgt_emb = Embedding::new("bl.emb", cfg.tgt_vocab, d, &mut params, &mut rng);
        let shift = StartShift::new("bl", d, &mut params, &mut rng);
        let pos = PosEmbedding::new("bl", cfg.max_tgt_len, d, &mut params, &mut rng);
        let blocks = (0..cfg.dec_layers)
            .map(|i| DecBlock::new(&format!("bl.block{i}"), d, cfg.heads, ff, &mut params, &mut rng))
            .collect();
        let norm = Norm::new("bl.norm", d, &mut params, &mut rng);
        let out = Linear::new("bl.out", d, cfg.tgt_vocab, true, &mut params, &mut rng);
        ArBaseline {
            params,
            vocab: cfg.tgt_vocab,
            src_enc,
            tgt_emb,
            shift,
            pos,
            blocks,
            norm,
            out,
        }
    }

    fn logits(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: &[u32],
        x_mask: &[bool],
        b: usize,
        k: usize,
        y: &[u32],
        n: usize,
    ) -> Result<Tensor> {
        let x_enc = self.src_enc.encode(g, ps, x, b, k, Some(x_mask))?;
        let y_emb = self.tgt_emb.lookup(g, ps, y, b, n)?;
        let mut s = self.shift.apply(g, ps, y_emb)?;
        s = self.pos.add_to(g, ps, s)?;
        for block in &self.blocks {
            s = block.apply(g, ps, s, x_enc, Some(x_mask))?;
        }
        s = self.norm.apply(g, ps, s)?;
        self.out.apply(g, ps, s)
    }

    /// Teacher-forced mean cross-entropy over non-pad positions.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        x: &[u32],
        x_mask: &[bool],
        b: usize,
        k: usize,
        y: &[u32],
        n: usize,
    ) -> Result<Tensor> {
        let logits = self.logits(g, &self.params, x, x_mask, b, k, y, n)?;
        let flat = g.reshape(logits, &[b * n, self.vocab])?;
        g.cross_entropy(flat, y, PAD)
    }

    /// Teacher-forced total log-likelihood of each candidate row (summed over
    /// its real tokens including eos).
    #[allow(clippy::too_many_arguments)]
    pub fn score(
        &self,
        x: &[u32],
        x_mask: &[bool],
        b: usize,
        k: usize,
        y: &[u32],
        n: usize,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &self.params, x, x_mask, b, k, y, n)?;
        let vals = g.values(logits);
        let mut scores = vec![0.0; b];
        for r in 0..b {
            for t in 0..n {
                let target = y[r * n + t];
                if target == PAD {
                    break;
                }
                let row = &vals[(r * n + t) * self.vocab..(r * n + t + 1) * self.vocab];
                scores[r] += log_softmax_at(row, target as usize);
                if target == EOS {
                    break;
                }
            }
        }
        Ok(scores)
    }

    /// Greedy decoding, one sequential invocation per emitted token. When
    /// `force_len` is set, decodes exactly that many positions with no early
    /// eos stop (used for timing structure); otherwise stops a row at eos.
    #[allow(clippy::too_many_arguments)]
    pub fn greedy_decode(
        &self,
        x: &[u32],
        x_mask: &[bool],
        b: usize,
        k: usize,
        max_len: usize,
        force_len: Option<usize>,
        sequential_steps: &mut u64,
    ) -> Result<Vec<Vec<u32>>> {
        let steps = force_len.unwrap_or(max_len);
        let mut g = Graph::new();
        let x_enc = self.src_enc.encode(&mut g, &self.params, x, b, k, Some(x_mask))?;
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for t in 0..steps {
            *sequential_steps += 1;
            // prefix of length t+1; the last position is a dummy the shift discards
            let mut y = Vec::with_capacity(b * (t + 1));
            for row in &rows {
                y.extend_from_slice(row);
                y.push(0);
            }
            let y_emb = self.tgt_emb.lookup(&mut g, &self.params, &y, b, t + 1)?;
            let mut s = self.shift.apply(&mut g, &self.params, y_emb)?;
            s = self.pos.add_to(&mut g, &self.params, s)?;
            for block in &self.blocks {
                s = block.apply(&mut g, &self.params, s, x_enc, Some(x_mask))?;
            }
            s = self.norm.apply(&mut g, &self.params, s)?;
            let mut last_w = vec![0.0; b * (t + 1)];
            for r in 0..b {
                last_w[r * (t + 1) + t] = 1.0;
            }
            let last = g.weighted_sum_rows(s, &last_w)?;
            let logits = self.out.apply(&mut g, &self.params, last)?;
            let vals = g.values(logits);
            for r in 0..b {
                let row = &vals[r * self.vocab..(r + 1) * self.vocab];
                let next = argmax(row) as u32;
                rows[r].push(next);
                if next == EOS {
                    done[r] = true;
                }
            }
            if force_len.is_none() && done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(rows)
    }
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[idx] - lse
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
