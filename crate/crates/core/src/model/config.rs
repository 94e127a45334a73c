use crate::bottleneck::BottleneckKind;
use crate::error::{Error, Result};

/// Architecture and latent-space settings shared by every component.
///
/// Desk-scale defaults; the corresponding large-scale reference values are
/// D=512, 6-layer encoders/decoders, log2 K of 14-16, 33K-subword vocab.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// Hidden size D.
    pub d_model: usize,
    pub heads: usize,
    /// Feed-forward hidden size as a multiple of d_model.
    pub ff_mult: usize,
    /// Bits in a latent code; K = 2^log2_k.
    pub log2_k: u32,
    /// Decompositions for DVQ (ignored by other bottlenecks).
    pub n_d: usize,
    pub bottleneck: BottleneckKind,
    /// Compression exponent c; each latent covers C = 2^c output positions.
    pub compression_exp: u32,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub lp_layers: usize,
    /// Steps of decoder teacher forcing before switching to latents.
    pub pretrain_steps: u64,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub max_src_len: usize,
    /// Must be a multiple of C.
    pub max_tgt_len: usize,
    pub seed: u64,
    /// EMA decay lambda for DVQ codebooks.
    pub ema_decay: f64,
    /// Commitment coefficient in the DVQ auxiliary loss.
    pub beta: f64,
    /// Squared commitment norm (the VQ-VAE convention) vs. plain l2.
    pub commitment_squared: bool,
    /// Gumbel-Softmax temperature when no anneal is configured.
    pub temperature: f64,
    /// Optional linear temperature anneal (from, to) across training.
    pub temp_anneal: Option<(f64, f64)>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 2,
            ff_mult: 2,
            log2_k: 14,
            n_d: 2,
            bottleneck: BottleneckKind::SemHash,
            compression_exp: 3,
            enc_layers: 2,
            dec_layers: 2,
            lp_layers: 2,
            pretrain_steps: 1000,
            src_vocab: 16,
            tgt_vocab: 16,
            max_src_len: 64,
            max_tgt_len: 64,
            seed: 1,
            ema_decay: 0.999,
            beta: 0.25,
            commitment_squared: true,
            temperature: 0.5,
            temp_anneal: None,
        }
    }
}

impl ModelConfig {
    /// C = 2^c.
    pub fn compression(&self) -> usize {
        1usize << self.compression_exp
    }

    /// Latent positions for the maximum target length.
    pub fn max_m(&self) -> usize {
        self.max_tgt_len / self.compression()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.heads != 0 {
            return Err(Error::NotDivisible {
                op: "config: d_model/heads",
                dim: self.d_model,
                by: self.heads,
            });
        }
        if self.max_tgt_len % self.compression() != 0 {
            return Err(Error::NotDivisible {
                op: "config: max_tgt_len/C",
                dim: self.max_tgt_len,
                by: self.compression(),
            });
        }
        let needs_slices = matches!(
            self.bottleneck,
            BottleneckKind::DvqSliced | BottleneckKind::DvqProjected
        );
        if needs_slices {
            if self.log2_k as usize % self.n_d != 0 {
                return Err(Error::NotDivisible {
                    op: "config: log2_k/n_d",
                    dim: self.log2_k as usize,
                    by: self.n_d,
                });
            }
            if self.d_model % self.n_d != 0 {
                return Err(Error::NotDivisible {
                    op: "config: d_model/n_d",
                    dim: self.d_model,
                    by: self.n_d,
                });
            }
        }
        if self.tgt_vocab <= 3 || self.src_vocab <= 3 {
            return Err(Error::Config("vocab must exceed the reserved ids".into()));
        }
        Ok(())
    }

    /// Gumbel temperature at a training step.
    pub fn temperature_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.temp_anneal {
            None => self.temperature,
            Some((from, to)) => {
                let t = if total_steps == 0 {
                    1.0
                } else {
                    (step as f64 / total_steps as f64).min(1.0)
                };
                from + (to - from) * t
            }
        }
    }
}
