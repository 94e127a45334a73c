//! `eval`: reconstruction / latent-prediction losses and full-pipeline token
//! accuracy of a trained checkpoint on held-out data.

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::runner::{self, DataSource};
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub pairs: usize,
    /// Eval-mode reconstruction loss == per-token log-perplexity.
    pub recon_log_pplx: f64,
    pub l_lp: f64,
    pub usage_fraction: f64,
    pub pipeline_token_accuracy: f64,
}

pub fn run(mut cfg: RunConfig, ckpt: &Path) -> Result<EvalReport, CliError> {
    let data = DataSource::new(&mut cfg).map_err(CliError::Config)?;
    let state = checkpoint::load(ckpt, &cfg.model, cfg.lr, cfg.steps, cfg.baseline)
        .map_err(CliError::Config)?;
    let pairs = data.eval_pairs(cfg.eval_size);
    let (l_r, hist) = runner::eval_reconstruction(&state, &cfg, &pairs).map_err(CliError::Other)?;
    let l_lp = runner::eval_lp(&state, &cfg, &pairs).map_err(CliError::Other)?;
    let usage = latseq::bottleneck::usage_fraction(&hist);
    let acc = runner::pipeline_accuracy(&state, &cfg, &pairs, cfg.batch_size)
        .map_err(CliError::Other)?;
    Ok(EvalReport {
        step: state.step,
        pairs: pairs.len(),
        recon_log_pplx: l_r,
        l_lp,
        usage_fraction: usage,
        pipeline_token_accuracy: acc,
    })
}
