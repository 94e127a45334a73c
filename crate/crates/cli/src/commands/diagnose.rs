//! `diagnose`: time-binned codeword usage histograms and the index-collapse
//! flag for a trained checkpoint.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use latseq::bottleneck::{Mode, UsageTracker};
use latseq::data::batch;
use latseq::model::DecoderFeed;
use latseq::tensor::Graph;
use serde::Serialize;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::runner::DataSource;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct DiagnoseReport {
    pub positions: u64,
    pub usage_fraction: f64,
    pub per_slice_used: Vec<usize>,
    pub k_prime: usize,
    pub n_d: usize,
    pub collapse_threshold: f64,
    pub collapsed: bool,
    pub csv_path: String,
}

pub fn run(mut cfg: RunConfig, ckpt: &Path, out_dir: &Path) -> Result<DiagnoseReport, CliError> {
    let data = DataSource::new(&mut cfg).map_err(CliError::Config)?;
    let state = checkpoint::load(ckpt, &cfg.model, cfg.lr, cfg.steps, cfg.baseline)
        .map_err(CliError::Config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::Other(e.into()))?;

    let n_d = state.lt.bottleneck.n_d();
    let k_prime = state.lt.bottleneck.k_prime();
    let pairs = data.eval_pairs(cfg.eval_size);
    let n_batches = pairs.len().div_ceil(cfg.batch_size.max(1));
    let bin = (n_batches as u64 / 16).max(1);
    let mut tracker = UsageTracker::new(n_d, k_prime, bin);

    for (i, chunk) in pairs.chunks(cfg.batch_size.max(1)).enumerate() {
        let b = batch(chunk, cfg.model.compression(), cfg.model.max_tgt_len)
            .map_err(CliError::Other)?;
        let mut g = Graph::new();
        // usage comes from the codes themselves; for bottlenecks without a
        // codebook (gumbel, semhash) these are the argmax / rounded codes
        let out = state
            .lt
            .recon_forward(&mut g, &b, Mode::Eval, DecoderFeed::Latents, cfg.model.temperature, None)
            .map_err(CliError::Other)?;
        tracker.record(i as u64, &out.slice_indices);
    }

    let csv_path = out_dir.join("usage.csv");
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(&csv_path).map_err(|e| CliError::Other(e.into()))?,
    );
    writeln!(f, "step_bin,slice,code,count").map_err(|e| CliError::Other(e.into()))?;
    for (bin, slice, code, count) in tracker.csv_rows() {
        writeln!(f, "{bin},{slice},{code},{count}").map_err(|e| CliError::Other(e.into()))?;
    }
    f.flush().map_err(|e| CliError::Other(e.into()))?;

    let fraction = tracker.usage_fraction().map_err(CliError::Other)?;
    let per_slice_used = tracker
        .totals()
        .iter()
        .map(|h| h.iter().filter(|&&c| c > 0).count())
        .collect();
    Ok(DiagnoseReport {
        positions: tracker.positions_seen(),
        usage_fraction: fraction,
        per_slice_used,
        k_prime,
        n_d,
        collapse_threshold: cfg.collapse_threshold,
        collapsed: fraction < cfg.collapse_threshold,
        csv_path: csv_path.display().to_string(),
    })
}
