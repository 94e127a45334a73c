//! The latent-sequence model bundle: autoencoder + bottleneck + latent
//! predictor, with the fast decode pipeline (autoregressive latents, one
//! parallel output pass) and noisy-parallel-decoding rescoring.

use crate::bottleneck::{Bottleneck, BottleneckIo, Mode};
use crate::data::{strip_pad, EncodedBatch, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Graph, ParamSet, Tensor};

use super::autoencoder::{DecoderFeed, SeqAutoencoder};
use super::baseline::ArBaseline;
use super::config::ModelConfig;
use super::predictor::{DecodeMode, LatentPredictor, LatentSequence};

/// Sequential-invocation instrumentation, independent of wall clock.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecodeStats {
    /// Sequential latent-model invocations (one per generated latent position).
    pub lp_sequential: u64,
    /// Parallel output passes.
    pub ad_passes: u64,
    /// Sequential token-model invocations of the autoregressive baseline.
    pub ar_sequential: u64,
}

#[derive(Debug, Clone)]
pub enum LengthMode {
    /// Latent lengths supplied by the caller (reference targets known).
    Oracle(Vec<usize>),
    /// Latent lengths from the predictor's length classifier.
    Predicted,
}

/// One reconstruction pass: logits plus everything the training loop needs.
pub struct ReconOut {
    pub logits: Tensor,
    pub l_r: Tensor,
    pub aux: Option<Tensor>,
    pub z_d: Vec<u64>,
    pub slice_indices: Vec<u32>,
    /// Pre-bottleneck encoder rows (b*m x D) for the EMA update.
    pub enc_rows: Vec<f64>,
    pub m: usize,
}

pub struct LatentTransformer {
    pub cfg: ModelConfig,
    /// Autoencoder-side parameters: source encoder, ae, ad, bottleneck.
    pub params: ParamSet,
    /// Latent-predictor-side parameters (own source encoder, heads).
    pub lp_params: ParamSet,
    pub bottleneck: Bottleneck,
    pub autoencoder: SeqAutoencoder,
    pub predictor: LatentPredictor,
}

impl LatentTransformer {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut lp_params = ParamSet::new();
        let root = CounterRng::new(cfg.seed, 0);
        let mut ae_rng = root.derive(1);
        let mut bn_rng = root.derive(2);
        let mut lp_rng = root.derive(3);
        let autoencoder = SeqAutoencoder::new(&cfg, &mut params, &mut ae_rng);
        let bottleneck = Bottleneck::new(
            cfg.bottleneck,
            cfg.d_model,
            cfg.log2_k,
            cfg.n_d,
            cfg.ema_decay,
            cfg.beta,
            cfg.commitment_squared,
            "ae.bottleneck",
            &mut params,
            &mut bn_rng,
        )?;
        let predictor = LatentPredictor::new(
            &cfg,
            bottleneck.n_d(),
            bottleneck.k_prime(),
            &mut lp_params,
            &mut lp_rng,
        );
        Ok(LatentTransformer {
            cfg,
            params,
            lp_params,
            bottleneck,
            autoencoder,
            predictor,
        })
    }

    /// ae -> bottleneck -> ad over one batch. `feed` picks the decoder input
    /// stream (the pretraining gate decides during training).
    pub fn recon_forward(
        &self,
        g: &mut Graph,
        batch: &EncodedBatch,
        mode: Mode,
        feed: DecoderFeed,
        temperature: f64,
        noise: Option<&mut CounterRng>,
    ) -> Result<ReconOut> {
        let (b, k, n) = (batch.b, batch.src_len, batch.tgt_len);
        let x_enc = self
            .autoencoder
            .encode_source(g, &self.params, &batch.x, b, k, Some(&batch.x_mask))?;
        let y_emb = self.autoencoder.embed_targets(g, &self.params, &batch.y, b, n)?;
        let enc = self
            .autoencoder
            .compress(g, &self.params, y_emb, x_enc, Some(&batch.x_mask))?;
        let m = g.shape(enc)[1];
        let enc_rows = g.values(enc).to_vec();
        let io: BottleneckIo = self
            .bottleneck
            .forward(g, &self.params, enc, mode, temperature, noise)?;
        let logits = self.autoencoder.reconstruct_logits(
            g,
            &self.params,
            io.z_q,
            y_emb,
            x_enc,
            Some(&batch.x_mask),
            feed,
        )?;
        let l_r = self
            .autoencoder
            .reconstruction_loss(g, logits, &batch.y, PAD)?;
        Ok(ReconOut {
            logits,
            l_r,
            aux: io.aux_loss,
            z_d: io.z_d,
            slice_indices: io.slice_indices,
            enc_rows,
            m,
        })
    }

    /// Latent prediction loss plus the length-bucket loss, on the predictor's
    /// own parameter set. Slice targets are integer constants; no gradient
    /// reaches the autoencoder through this path.
    pub fn lp_forward_loss(
        &self,
        g: &mut Graph,
        batch: &EncodedBatch,
        slice_targets: &[u32],
        m: usize,
    ) -> Result<(Tensor, Tensor)> {
        let (b, k) = (batch.b, batch.src_len);
        let x_enc = self
            .predictor
            .encode_source(g, &self.lp_params, &batch.x, b, k, Some(&batch.x_mask))?;
        let l_lp = self
            .predictor
            .loss(g, &self.lp_params, x_enc, Some(&batch.x_mask), slice_targets, b, m)?;
        let c = self.cfg.compression();
        let m_targets: Vec<usize> = (0..b)
            .map(|i| batch.y_len(i).div_ceil(c).max(1))
            .collect();
        let len_loss = self
            .predictor
            .length_loss(g, &self.lp_params, x_enc, &batch.x_mask, &m_targets)?;
        Ok((l_lp, len_loss))
    }

    /// Decode targets for raw source rows: generate latents autoregressively
    /// (m sequential invocations), embed the codes, reconstruct every output
    /// position in one parallel pass.
    #[allow(clippy::too_many_arguments)]
    pub fn full_decode(
        &self,
        sources: &[Vec<u32>],
        lengths: &LengthMode,
        mode: DecodeMode,
        rng: &mut CounterRng,
        stats: &mut DecodeStats,
    ) -> Result<Vec<Vec<u32>>> {
        let (x, x_mask, b, k) = pack_sources(sources);
        let ms: Vec<usize> = match lengths {
            LengthMode::Oracle(ms) => {
                if ms.len() != b {
                    return Err(Error::Config("oracle lengths: wrong count".into()));
                }
                ms.clone()
            }
            LengthMode::Predicted => {
                let mut g = Graph::new();
                let x_enc = self
                    .predictor
                    .encode_source(&mut g, &self.lp_params, &x, b, k, Some(&x_mask))?;
                self.predictor
                    .predict_lengths(&mut g, &self.lp_params, x_enc, &x_mask)?
            }
        };
        let m_max = *ms.iter().max().unwrap_or(&1);
        let seqs = self.predictor.generate(
            &self.lp_params,
            &x,
            &x_mask,
            b,
            k,
            m_max,
            mode,
            rng,
            &mut stats.lp_sequential,
        )?;
        let outputs = self.decode_codes(&seqs, &ms, &x, &x_mask, b, k, stats)?;
        Ok(outputs)
    }

    /// The parallel half of the pipeline: codes -> z_q -> upsample -> decoder
    /// logits -> argmax tokens per row, trimmed at each row's length and eos.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_codes(
        &self,
        seqs: &[LatentSequence],
        ms: &[usize],
        x: &[u32],
        x_mask: &[bool],
        b: usize,
        k: usize,
        stats: &mut DecodeStats,
    ) -> Result<Vec<Vec<u32>>> {
        let m_max = seqs.iter().map(|s| s.codes.len()).max().unwrap_or(0);
        let mut codes = Vec::with_capacity(b * m_max);
        for s in seqs {
            codes.extend_from_slice(&s.codes);
            codes.extend(std::iter::repeat(0).take(m_max - s.codes.len()));
        }
        let mut g = Graph::new();
        stats.ad_passes += 1;
        let x_enc = self
            .autoencoder
            .encode_source(&mut g, &self.params, x, b, k, Some(x_mask))?;
        let z_q = self
            .bottleneck
            .embed_code(&mut g, &self.params, &codes, b, m_max)?;
        let ups = self
            .autoencoder
            .upsample(&mut g, &self.params, z_q, x_enc, Some(x_mask))?;
        let logits = self
            .autoencoder
            .decode(&mut g, &self.params, ups, x_enc, Some(x_mask))?;
        let vals = g.values(logits);
        let n_max = m_max * self.cfg.compression();
        let v = self.cfg.tgt_vocab;
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let n_r = ms[r].min(m_max) * self.cfg.compression();
            let mut tokens = Vec::with_capacity(n_r);
            for t in 0..n_r {
                let row = &vals[(r * n_max + t) * v..(r * n_max + t + 1) * v];
                tokens.push(argmax(row) as u32);
            }
            out.push(strip_pad(&tokens));
        }
        Ok(out)
    }

    /// Decode several candidate latent sequences for one source in a single
    /// parallel batch, score every resulting output under the autoregressive
    /// baseline, and keep the best. The argmax can only improve on any
    /// candidate already in the set.
    #[allow(clippy::too_many_arguments)]
    pub fn npd_rescore(
        &self,
        baseline: &ArBaseline,
        source: &[u32],
        m: usize,
        candidates: usize,
        temperature: f64,
        rng: &mut CounterRng,
        stats: &mut DecodeStats,
    ) -> Result<Vec<u32>> {
        if candidates == 0 {
            return Err(Error::NoCandidates);
        }
        // candidate 0 is the greedy sequence; the rest are sampled
        let sources: Vec<Vec<u32>> = (0..candidates).map(|_| source.to_vec()).collect();
        let (x, x_mask, rows, k) = pack_sources(&sources);
        let greedy = self.predictor.generate(
            &self.lp_params,
            &x[..k],
            &x_mask[..k],
            1,
            k,
            m,
            DecodeMode::Greedy,
            rng,
            &mut stats.lp_sequential,
        )?;
        let mut seqs = greedy;
        if candidates > 1 {
            let sampled = self.predictor.generate(
                &self.lp_params,
                &x[k..],
                &x_mask[k..],
                rows - 1,
                k,
                m,
                DecodeMode::Sample { temperature },
                rng,
                &mut stats.lp_sequential,
            )?;
            seqs.extend(sampled);
        }
        let ms = vec![m; rows];
        let outputs = self.decode_codes(&seqs, &ms, &x, &x_mask, rows, k, stats)?;
        let selected = rescore(baseline, source, &outputs, self.cfg.max_tgt_len)?;
        Ok(outputs[selected].clone())
    }
}

/// Score candidate outputs under the baseline's teacher-forced likelihood and
/// return the index of the best (ties break toward the earliest candidate).
pub fn rescore(
    baseline: &ArBaseline,
    source: &[u32],
    candidates: &[Vec<u32>],
    max_len: usize,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::NoCandidates);
    }
    let b = candidates.len();
    let (x1, _, _, k) = pack_sources(&[source.to_vec()]);
    let mut x = Vec::with_capacity(b * k);
    let mut x_mask = Vec::with_capacity(b * k);
    for _ in 0..b {
        x.extend_from_slice(&x1);
        x_mask.extend(x1.iter().map(|&t| t != PAD));
    }
    let n = candidates
        .iter()
        .map(|c| (c.len() + 1).min(max_len))
        .max()
        .unwrap();
    let mut y = vec![PAD; b * n];
    for (r, cand) in candidates.iter().enumerate() {
        let len = cand.len().min(n - 1);
        y[r * n..r * n + len].copy_from_slice(&cand[..len]);
        y[r * n + len] = EOS;
    }
    let scores = baseline.score(&x, &x_mask, b, k, &y, n)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Append eos and pad raw source rows to a rectangle.
pub fn pack_sources(sources: &[Vec<u32>]) -> (Vec<u32>, Vec<bool>, usize, usize) {
    let b = sources.len();
    let k = sources.iter().map(|s| s.len() + 1).max().unwrap_or(1);
    let mut x = vec![PAD; b * k];
    let mut mask = vec![false; b * k];
    for (i, s) in sources.iter().enumerate() {
        for (j, &t) in s.iter().enumerate() {
            x[i * k + j] = t;
            mask[i * k + j] = true;
        }
        x[i * k + s.len()] = EOS;
        mask[i * k + s.len()] = true;
    }
    (x, mask, b, k)
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
