//! Model components: the compressing autoencoder over targets, the
//! autoregressive latent predictor, the token-level autoregressive baseline,
//! and the bundle that ties them to a discretization bottleneck.

mod autoencoder;
mod baseline;
mod config;
mod layers;
mod lt;
mod predictor;

pub use autoencoder::{pretrain_gate, DecoderFeed, SeqAutoencoder};
pub use baseline::ArBaseline;
pub use config::ModelConfig;
pub use layers::{
    CompressConv, DecBlock, Embedding, EncBlock, FeedForward, Linear, Mha, Norm, PosEmbedding,
    ResidualConvBlock, SourceEncoder, StartShift, UpConv,
};
pub use lt::{pack_sources, rescore, DecodeStats, LatentTransformer, LengthMode, ReconOut};
pub use predictor::{DecodeMode, LatentPredictor, LatentSequence};

/// Fraction of positions where prediction matches the reference, counted over
/// the reference's real tokens (including its terminating eos).
pub fn token_accuracy(pred: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (p, r) in pred.iter().zip(refs) {
        for (j, &t) in r.iter().enumerate() {
            total += 1;
            if p.get(j) == Some(&t) {
                hit += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
