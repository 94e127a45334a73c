//! Autoregressive model over discrete latent sequences.
//!
//! One transformer invocation per latent position produces a hidden state;
//! the per-position distribution over the K codes factorizes over the code's
//! n_d slices (chain rule), each predicted by a small head conditioned on the
//! hidden state plus embeddings of the already-fixed slices. The code-level
//! likelihood is unchanged and the softmax width stays K'.

use crate::bottleneck::compose_code;
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Graph, ParamSet, Tensor};

use super::config::ModelConfig;
use super::layers::{DecBlock, Embedding, Linear, Norm, PosEmbedding, SourceEncoder, StartShift};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64 },
    /// Sample from the k most probable slice values (renormalized);
    /// k = 1 reduces to greedy.
    TopK { k: usize },
}

/// A generated latent sequence with its accumulated log-probability.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub codes: Vec<u64>,
    /// Row-major m x n_d slice indices.
    pub slice_indices: Vec<u32>,
    pub log_prob: f64,
}

pub struct LatentPredictor {
    d: usize,
    n_d: usize,
    k_prime: usize,
    max_m: usize,
    pub src_enc: SourceEncoder,
    slice_embs: Vec<Embedding>,
    shift: StartShift,
    pos: PosEmbedding,
    blocks: Vec<DecBlock>,
    norm: Norm,
    heads: Vec<Linear>,
    len_head: Linear,
}

impl LatentPredictor {
    pub fn new(
        cfg: &ModelConfig,
        n_d: usize,
        k_prime: usize,
        ps: &mut ParamSet,
        rng: &mut CounterRng,
    ) -> Self {
        let d = cfg.d_model;
        let ff = cfg.ff_mult * d;
        let max_m = cfg.max_m().max(1);
        LatentPredictor {
            d,
            n_d,
            k_prime,
            max_m,
            src_enc: SourceEncoder::new(
                "lp.src",
                cfg.src_vocab,
                d,
                cfg.heads,
                ff,
                cfg.enc_layers,
                cfg.max_src_len,
                ps,
                rng,
            ),
            slice_embs: (0..n_d)
                .map(|i| Embedding::new(&format!("lp.slice{i}"), k_prime, d, ps, rng))
                .collect(),
            shift: StartShift::new("lp", d, ps, rng),
            pos: PosEmbedding::new("lp", max_m, d, ps, rng),
            blocks: (0..cfg.lp_layers)
                .map(|i| DecBlock::new(&format!("lp.block{i}"), d, cfg.heads, ff, ps, rng))
                .collect(),
            norm: Norm::new("lp.norm", d, ps, rng),
            heads: (0..n_d)
                .map(|i| Linear::new(&format!("lp.head{i}"), d, k_prime, true, ps, rng))
                .collect(),
            len_head: Linear::new("lp.len", d, max_m, true, ps, rng),
        }
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn k_prime(&self) -> usize {
        self.k_prime
    }

    pub fn max_m(&self) -> usize {
        self.max_m
    }

    pub fn encode_source(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x: &[u32],
        b: usize,
        k: usize,
        x_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        self.src_enc.encode(g, ps, x, b, k, x_mask)
    }

    /// Sum of per-slice embeddings for each latent position.
    /// `slice_indices` is row-major b x m x n_d.
    fn token_embedding(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        slice_indices: &[u32],
        b: usize,
        m: usize,
    ) -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for (i, emb) in self.slice_embs.iter().enumerate() {
            let ids: Vec<u32> = (0..b * m)
                .map(|p| slice_indices[p * self.n_d + i])
                .collect();
            let e = emb.lookup(g, ps, &ids, b, m)?;
            acc = Some(match acc {
                None => e,
                Some(a) => g.add(a, e)?,
            });
        }
        Ok(acc.expect("n_d >= 1"))
    }

    /// Causal hidden states over the (shifted) latent input embeddings.
    fn hidden(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        inp_emb: Tensor,
        x_enc: Tensor,
        x_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let mut s = self.shift.apply(g, ps, inp_emb)?;
        s = self.pos.add_to(g, ps, s)?;
        for block in &self.blocks {
            s = block.apply(g, ps, s, x_enc, x_mask)?;
        }
        self.norm.apply(g, ps, s)
    }

    /// Teacher-forced latent prediction loss: mean over b*m positions of the
    /// full-code negative log-likelihood (summed over slices).
    pub fn loss(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_enc: Tensor,
        x_mask: Option<&[bool]>,
        slice_targets: &[u32],
        b: usize,
        m: usize,
    ) -> Result<Tensor> {
        if m > self.max_m {
            return Err(Error::Config(format!(
                "latent length {m} exceeds predictor maximum {}",
                self.max_m
            )));
        }
        let inp = self.token_embedding(g, ps, slice_targets, b, m)?;
        let h = self.hidden(g, ps, inp, x_enc, x_mask)?;
        let mut cond = g.reshape(h, &[b * m, self.d])?;
        let mut total: Option<Tensor> = None;
        for i in 0..self.n_d {
            let logits = self.heads[i].apply(g, ps, cond)?;
            let targets: Vec<u32> = (0..b * m)
                .map(|p| slice_targets[p * self.n_d + i])
                .collect();
            let ce = g.cross_entropy(logits, &targets, u32::MAX)?;
            total = Some(match total {
                None => ce,
                Some(t) => g.add(t, ce)?,
            });
            if i + 1 < self.n_d {
                let table = g.param(ps, self.slice_embs_table(i));
                let e = g.gather(table, &targets)?;
                cond = g.add(cond, e)?;
            }
        }
        Ok(total.expect("n_d >= 1"))
    }

    fn slice_embs_table(&self, i: usize) -> crate::tensor::ParamId {
        self.slice_embs[i].table_id()
    }

    /// Length-bucket loss: predict m (1-based) from pooled source states.
    pub fn length_loss(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_enc: Tensor,
        x_mask: &[bool],
        m_targets: &[usize],
    ) -> Result<Tensor> {
        let logits = self.length_logits(g, ps, x_enc, x_mask)?;
        let targets: Vec<u32> = m_targets
            .iter()
            .map(|&m| {
                debug_assert!(m >= 1 && m <= self.max_m);
                (m - 1) as u32
            })
            .collect();
        g.cross_entropy(logits, &targets, u32::MAX)
    }

    fn length_logits(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_enc: Tensor,
        x_mask: &[bool],
    ) -> Result<Tensor> {
        let shape = g.shape(x_enc).to_vec();
        let (b, k) = (shape[0], shape[1]);
        let mut weights = vec![0.0; b * k];
        for r in 0..b {
            let count = x_mask[r * k..(r + 1) * k].iter().filter(|&&m| m).count();
            for j in 0..k {
                if x_mask[r * k + j] {
                    weights[r * k + j] = 1.0 / count.max(1) as f64;
                }
            }
        }
        let pooled = g.weighted_sum_rows(x_enc, &weights)?;
        self.len_head.apply(g, ps, pooled)
    }

    /// Predicted latent length per row (argmax bucket + 1).
    pub fn predict_lengths(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_enc: Tensor,
        x_mask: &[bool],
    ) -> Result<Vec<usize>> {
        let logits = self.length_logits(g, ps, x_enc, x_mask)?;
        let vals = g.values(logits);
        Ok(vals
            .chunks_exact(self.max_m)
            .map(|row| argmax(row) + 1)
            .collect())
    }

    /// Full next-position distribution over all K codes given a prefix, by
    /// chaining the slice heads (enumerates K; meant for inspection and
    /// tests at small K).
    pub fn next_code_distribution(
        &self,
        ps: &ParamSet,
        x: &[u32],
        x_mask: &[bool],
        k_len: usize,
        prefix: &[u32],
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x_enc = self.encode_source(&mut g, ps, x, 1, k_len, Some(x_mask))?;
        let t = prefix.len() / self.n_d;
        let h_last = self.hidden_at(&mut g, ps, x_enc, Some(x_mask), prefix, 1, t)?;

        let k_total = self.k_prime.pow(self.n_d as u32);
        let mut dist = vec![0.0f64; k_total];
        for code in 0..k_total {
            let parts = crate::bottleneck::decompose_code(code as u64, self.n_d, self.k_prime)?;
            let mut logp = 0.0;
            let mut cond = h_last;
            for (i, &part) in parts.iter().enumerate() {
                let logits = self.heads[i].apply(&mut g, ps, cond)?;
                let probs = g.softmax(logits);
                logp += g.values(probs)[part as usize].ln();
                if i + 1 < self.n_d {
                    let table = g.param(ps, self.slice_embs_table(i));
                    let e = g.gather(table, &[part])?;
                    cond = g.add(cond, e)?;
                }
            }
            dist[code] = logp.exp();
        }
        Ok(dist)
    }

    /// Hidden state at position `t` for `rows` sequences sharing one prefix
    /// length; prefix is row-major rows x t x n_d.
    fn hidden_at(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        x_enc: Tensor,
        x_mask: Option<&[bool]>,
        prefix: &[u32],
        rows: usize,
        t: usize,
    ) -> Result<Tensor> {
        // extend with a dummy position that the right-shift discards
        let mut ext = Vec::with_capacity(rows * (t + 1) * self.n_d);
        for r in 0..rows {
            ext.extend_from_slice(&prefix[r * t * self.n_d..(r + 1) * t * self.n_d]);
            ext.extend(std::iter::repeat(0).take(self.n_d));
        }
        let inp = self.token_embedding(g, ps, &ext, rows, t + 1)?;
        let h = self.hidden(g, ps, inp, x_enc, x_mask)?;
        let mut weights = vec![0.0; rows * (t + 1)];
        for r in 0..rows {
            weights[r * (t + 1) + t] = 1.0;
        }
        g.weighted_sum_rows(h, &weights)
    }

    /// Generate latent sequences for `rows` source rows in lockstep; one
    /// sequential model invocation per latent position (slice heads inside a
    /// position reuse the same hidden state). Returns one sequence per row.
    #[allow(clippy::too_many_arguments)]
    pub fn generate(
        &self,
        ps: &ParamSet,
        x: &[u32],
        x_mask: &[bool],
        rows: usize,
        k_len: usize,
        m: usize,
        mode: DecodeMode,
        rng: &mut CounterRng,
        sequential_steps: &mut u64,
    ) -> Result<Vec<LatentSequence>> {
        if let DecodeMode::TopK { k } = mode {
            if k < 1 {
                return Err(Error::Config("topk: k must be >= 1".into()));
            }
        }
        let mut g = Graph::new();
        let x_enc = self.encode_source(&mut g, ps, x, rows, k_len, Some(x_mask))?;

        let mut prefix: Vec<u32> = Vec::new(); // rows x t x n_d, rebuilt per step
        let mut seqs: Vec<LatentSequence> = (0..rows)
            .map(|_| LatentSequence {
                codes: Vec::new(),
                slice_indices: Vec::new(),
                log_prob: 0.0,
            })
            .collect();

        for t in 0..m {
            *sequential_steps += 1;
            let mut cond = self.hidden_at(&mut g, ps, x_enc, Some(x_mask), &prefix, rows, t)?;
            let mut chosen = vec![0u32; rows * self.n_d];
            for i in 0..self.n_d {
                let logits = self.heads[i].apply(&mut g, ps, cond)?;
                let logits = match mode {
                    DecodeMode::Sample { temperature } if temperature > 0.0 => {
                        g.scale(logits, 1.0 / temperature)
                    }
                    _ => logits,
                };
                let probs_t = g.softmax(logits);
                let probs = g.values(probs_t);
                for r in 0..rows {
                    let row = &probs[r * self.k_prime..(r + 1) * self.k_prime];
                    let pick = match mode {
                        DecodeMode::Greedy => argmax(row),
                        DecodeMode::Sample { .. } => sample_index(row, rng),
                        DecodeMode::TopK { k } => sample_top_k(row, k, rng),
                    };
                    chosen[r * self.n_d + i] = pick as u32;
                    seqs[r].log_prob += row[pick].max(1e-300).ln();
                }
                if i + 1 < self.n_d {
                    let ids: Vec<u32> = (0..rows).map(|r| chosen[r * self.n_d + i]).collect();
                    let table = g.param(ps, self.slice_embs_table(i));
                    let e = g.gather(table, &ids)?;
                    cond = g.add(cond, e)?;
                }
            }
            // append the new position to every row's prefix (rows x t x n_d)
            let mut next = Vec::with_capacity(rows * (t + 1) * self.n_d);
            for r in 0..rows {
                next.extend_from_slice(&prefix[r * t * self.n_d..(r + 1) * t * self.n_d]);
                next.extend_from_slice(&chosen[r * self.n_d..(r + 1) * self.n_d]);
            }
            prefix = next;
            for r in 0..rows {
                let s = &mut seqs[r];
                let row = &chosen[r * self.n_d..(r + 1) * self.n_d];
                s.slice_indices.extend_from_slice(row);
                s.codes.push(compose_code(row, self.k_prime)?);
            }
        }
        Ok(seqs)
    }
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

fn sample_index(probs: &[f64], rng: &mut CounterRng) -> usize {
    let u = rng.uniform();
    let mut cdf = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cdf += p;
        if u < cdf {
            return i;
        }
    }
    probs.len() - 1
}

fn sample_top_k(probs: &[f64], k: usize, rng: &mut CounterRng) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
    let kept = &order[..k.min(order.len())];
    if kept.len() == 1 {
        return kept[0];
    }
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let u = rng.uniform() * total;
    let mut cdf = 0.0;
    for &i in kept {
        cdf += probs[i];
        if u < cdf {
            return i;
        }
    }
    kept[kept.len() - 1]
}
