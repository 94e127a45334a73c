//! The target autoencoder: `compress` squeezes embedded targets 2^c-fold into
//! pre-bottleneck states; `upsample` and `decode` reconstruct all output
//! positions in parallel from quantized latents plus the encoded source.

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{Graph, ParamSet, Tensor};

use super::config::ModelConfig;
use super::layers::{
    CompressConv, DecBlock, Embedding, Linear, Mha, Norm, PosEmbedding, ResidualConvBlock,
    SourceEncoder, StartShift, UpConv,
};

/// What feeds the final self-attention decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderFeed {
    /// Upsampled latents, shifted right behind a learned start vector
    /// (normal operation; keeps outputs independent of each other).
    Latents,
    /// Embedded true targets, shifted right (pretraining).
    TeacherForced,
}

/// Decoder-input selector: teacher forcing for the first `pretrain_steps`.
pub fn pretrain_gate(step: u64, cfg: &ModelConfig) -> DecoderFeed {
    if step < cfg.pretrain_steps {
        DecoderFeed::TeacherForced
    } else {
        DecoderFeed::Latents
    }
}

struct UpStep {
    res: ResidualConvBlock,
    attn_norm: Norm,
    attn: Mha,
    up: UpConv,
}

pub struct SeqAutoencoder {
    d: usize,
    c: u32,
    pub src_enc: SourceEncoder,
    tgt_emb: Embedding,
    ae_pos: PosEmbedding,
    ae_res: ResidualConvBlock,
    ae_attn_norm: Norm,
    ae_attn: Mha,
    compress_convs: Vec<CompressConv>,
    up_steps: Vec<UpStep>,
    up_pos: PosEmbedding,
    dec_shift: StartShift,
    dec_pos: PosEmbedding,
    dec_blocks: Vec<DecBlock>,
    dec_norm: Norm,
    out: Linear,
}

impl SeqAutoencoder {
    pub fn new(cfg: &ModelConfig, ps: &mut ParamSet, rng: &mut CounterRng) -> Self {
        let d = cfg.d_model;
        let ff = cfg.ff_mult * d;
        SeqAutoencoder {
            d,
            c: cfg.compression_exp,
            src_enc: SourceEncoder::new(
                "src",
                cfg.src_vocab,
                d,
                cfg.heads,
                ff,
                cfg.enc_layers,
                cfg.max_src_len,
                ps,
                rng,
            ),
            tgt_emb: Embedding::new("ae.emb", cfg.tgt_vocab, d, ps, rng),
            ae_pos: PosEmbedding::new("ae", cfg.max_tgt_len, d, ps, rng),
            ae_res: ResidualConvBlock::new("ae.res", d, ps, rng),
            ae_attn_norm: Norm::new("ae.attn_norm", d, ps, rng),
            ae_attn: Mha::new("ae.attn", d, cfg.heads, ps, rng),
            compress_convs: (0..cfg.compression_exp)
                .map(|i| CompressConv::new(&format!("ae.compress{i}"), d, ps, rng))
                .collect(),
            up_steps: (0..cfg.compression_exp)
                .map(|i| UpStep {
                    res: ResidualConvBlock::new(&format!("ad.up{i}.res"), d, ps, rng),
                    attn_norm: Norm::new(&format!("ad.up{i}.attn_norm"), d, ps, rng),
                    attn: Mha::new(&format!("ad.up{i}.attn"), d, cfg.heads, ps, rng),
                    up: UpConv::new(&format!("ad.up{i}.upconv"), d, ps, rng),
                })
                .collect(),
            up_pos: PosEmbedding::new("ad.up", cfg.max_tgt_len, d, ps, rng),
            dec_shift: StartShift::new("dec", d, ps, rng),
            dec_pos: PosEmbedding::new("dec", cfg.max_tgt_len, d, ps, rng),
            dec_blocks: (0..cfg.dec_layers)
                .map(|i| DecBlock::new(&format!("dec.block{i}"), d, cfg.heads, ff, ps, rng))
                .collect(),
            dec_norm: Norm::new("dec.norm", d, ps, rng),
            out: Linear::new("dec.out", d, cfg.tgt_vocab, true, ps, rng),
        }
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

    pub fn embed_targets(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        y: &[u32],
        b: usize,
        n: usize,
    ) -> Result<Tensor> {
        self.tgt_emb.lookup(g, ps, y, b, n)
    }

    /// Embedded targets -> pre-bottleneck latent states of length n / 2^c:
    /// residual block, attention to the source, then c halving convolutions.
    pub fn compress(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        y_emb: Tensor,
        x_enc: Tensor,
        x_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let n = g.shape(y_emb)[1];
        if n % (1usize << self.c) != 0 {
            return Err(Error::NotDivisible {
                op: "compress",
                dim: n,
                by: 1usize << self.c,
            });
        }
        let mut s = self.ae_pos.add_to(g, ps, y_emb)?;
        s = self.ae_res.apply(g, ps, s)?;
        let h = self.ae_attn_norm.apply(g, ps, s)?;
        let a = self.ae_attn.apply(g, ps, h, x_enc, false, x_mask)?;
        s = g.add(s, a)?;
        for conv in &self.compress_convs {
            s = conv.apply(g, ps, s)?;
        }
        Ok(s)
    }

    /// Latents [b,m,D] -> [b, m*2^c, D] through c up-steps
    /// (residual block, attention to source, length-doubling up-convolution).
    pub fn upsample(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        z_q: Tensor,
        x_enc: Tensor,
        x_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let mut s = z_q;
        for step in &self.up_steps {
            s = self.up_pos.add_to(g, ps, s)?;
            s = step.res.apply(g, ps, s)?;
            let h = step.attn_norm.apply(g, ps, s)?;
            let a = step.attn.apply(g, ps, h, x_enc, false, x_mask)?;
            s = g.add(s, a)?;
            s = step.up.apply(g, ps, s)?;
        }
        Ok(s)
    }

    /// Final self-attention decoder over an input stream (shifted right with
    /// a learned start vector) with encoder-decoder attention to the source.
    /// Returns per-position vocabulary logits [b, n, V].
    pub fn decode(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        inputs: Tensor,
        x_enc: Tensor,
        x_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let mut s = self.dec_shift.apply(g, ps, inputs)?;
        s = self.dec_pos.add_to(g, ps, s)?;
        for block in &self.dec_blocks {
            s = block.apply(g, ps, s, x_enc, x_mask)?;
        }
        s = self.dec_norm.apply(g, ps, s)?;
        self.out.apply(g, ps, s)
    }

    /// Upsample-then-decode; `feed` selects the decoder's input stream.
    /// The upsample stack only runs when its output is actually consumed.
    #[allow(clippy::too_many_arguments)]
    pub fn reconstruct_logits(
        &self,
        g: &mut Graph,
        ps: &ParamSet,
        z_q: Tensor,
        y_emb: Tensor,
        x_enc: Tensor,
        x_mask: Option<&[bool]>,
        feed: DecoderFeed,
    ) -> Result<Tensor> {
        let n = g.shape(y_emb)[1];
        let inputs = match feed {
            DecoderFeed::TeacherForced => y_emb,
            DecoderFeed::Latents => {
                let ups = self.upsample(g, ps, z_q, x_enc, x_mask)?;
                if g.shape(ups)[1] != n {
                    return Err(Error::ShapeMismatch {
                        op: "reconstruct_logits",
                        lhs: g.shape(ups).to_vec(),
                        rhs: vec![n],
                    });
                }
                ups
            }
        };
        self.decode(g, ps, inputs, x_enc, x_mask)
    }

    /// Mean cross-entropy over non-pad target positions. The value is also
    /// the per-token log-perplexity (base e).
    pub fn reconstruction_loss(
        &self,
        g: &mut Graph,
        logits: Tensor,
        y: &[u32],
        pad_id: u32,
    ) -> Result<Tensor> {
        let shape = g.shape(logits).to_vec();
        let flat = g.reshape(logits, &[shape[0] * shape[1], shape[2]])?;
        g.cross_entropy(flat, y, pad_id)
    }

    pub fn d_model(&self) -> usize {
        self.d
    }

    pub fn compression(&self) -> usize {
        1usize << self.c
    }

    /// Fresh deterministic init used by tests that need a throwaway instance.
    pub fn for_tests(cfg: &ModelConfig) -> (Self, ParamSet) {
        let mut ps = ParamSet::new();
        let mut rng = CounterRng::new(cfg.seed, 0xAE);
        let ae = SeqAutoencoder::new(cfg, &mut ps, &mut rng);
        (ae, ps)
    }
}
