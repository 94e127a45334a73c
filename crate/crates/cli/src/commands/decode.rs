//! `decode`: run the fast pipeline (and optionally the autoregressive
//! baseline and NPD rescoring) over an input set, with per-sentence timing
//! and sequential-invocation counts.
//!
//! Large-scale context for the timing report: the reference setup measured
//! 105 ms/sentence for the latent pipeline vs 408 ms for its autoregressive
//! baseline at b=1 on WMT hardware; only the structure (fewer sequential
//! steps, batch-friendly) is expected to transfer to this implementation.

use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use serde::Serialize;

use latseq::data::strip_pad;
use latseq::model::{pack_sources, token_accuracy, DecodeMode, DecodeStats};

use crate::checkpoint::{self, TrainState};
use crate::config::RunConfig;
use crate::runner::{self, DataSource};
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub sentences: usize,
    pub batch_size: usize,
    pub per_sentence_ms: f64,
    pub lp_sequential: u64,
    pub ad_passes: u64,
    /// Sequential latent invocations per sentence batch-step (m).
    pub lp_steps_per_batch: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineTiming {
    pub sentences: usize,
    pub per_sentence_ms: f64,
    pub ar_sequential: u64,
}

#[derive(Debug, Serialize)]
pub struct DecodeReport {
    pub sentences: usize,
    pub mode: String,
    pub timings: Vec<TimingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineTiming>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub npd_token_accuracy: Option<f64>,
}

pub struct DecodeArgs<'a> {
    pub ckpt: &'a Path,
    pub input: Option<&'a Path>,
    pub refs: Option<&'a Path>,
    pub batch_sizes: Vec<usize>,
    pub mode: DecodeMode,
    pub npd: bool,
    pub count: usize,
    pub out: Option<&'a Path>,
    pub with_baseline_timing: bool,
}

pub fn run(mut cfg: RunConfig, args: DecodeArgs<'_>) -> Result<(Vec<String>, DecodeReport), CliError> {
    let data = DataSource::new(&mut cfg).map_err(CliError::Config)?;
    let state = checkpoint::load(args.ckpt, &cfg.model, cfg.lr, cfg.steps, cfg.baseline)
        .map_err(CliError::Config)?;

    let (sources, refs): (Vec<Vec<u32>>, Option<Vec<Vec<u32>>>) = match args.input {
        Some(path) => {
            let sources = runner::read_source_lines(path, data.vocab()).map_err(CliError::Config)?;
            let refs = match args.refs {
                Some(rp) => Some(
                    runner::read_reference_lines(rp, data.vocab()).map_err(CliError::Config)?,
                ),
                None => None,
            };
            (sources, refs)
        }
        None => {
            let pairs = data.eval_pairs(args.count);
            let sources = pairs.iter().map(|(x, _)| x.clone()).collect();
            let refs = Some(pairs.iter().map(|(_, y)| y.clone()).collect());
            (sources, refs)
        }
    };
    if let (Some(r), true) = (&refs, args.refs.is_some()) {
        if r.len() != sources.len() {
            return Err(CliError::Config(anyhow::anyhow!(
                "reference count {} does not match input count {}",
                r.len(),
                sources.len()
            )));
        }
    }

    let mut outputs = Vec::new();
    let mut timings = Vec::new();
    for (i, &bs) in args.batch_sizes.iter().enumerate() {
        let t0 = Instant::now();
        let (out, stats) = runner::pipeline_decode(
            &state,
            &cfg,
            &sources,
            refs.as_deref(),
            bs,
            args.mode,
            cfg.seed,
        )
        .map_err(CliError::Other)?;
        let elapsed = t0.elapsed().as_secs_f64();
        let batches = sources.len().div_ceil(bs.max(1));
        timings.push(TimingReport {
            sentences: sources.len(),
            batch_size: bs,
            per_sentence_ms: elapsed * 1e3 / sources.len() as f64,
            lp_sequential: stats.lp_sequential,
            ad_passes: stats.ad_passes,
            lp_steps_per_batch: stats.lp_sequential as f64 / batches as f64,
        });
        if i == 0 {
            outputs = out;
        }
    }

    let token_acc = refs
        .as_ref()
        .map(|r| accuracy_with_eos(&outputs, r));

    // optional NPD pass over the same inputs
    let npd_acc = if args.npd {
        let bl = state
            .baseline
            .as_ref()
            .ok_or_else(|| CliError::Config(anyhow::anyhow!("NPD needs a trained baseline in the checkpoint")))?;
        let mut rescored = Vec::with_capacity(sources.len());
        let mut rng = latseq::rng::CounterRng::new(cfg.seed, 0x09D);
        let mut stats = DecodeStats::default();
        let c = cfg.model.compression();
        for (i, src) in sources.iter().enumerate() {
            let m = match &refs {
                Some(r) => (r[i].len() + 1).div_ceil(c).max(1),
                None => predict_length(&state, src, c)?,
            };
            let y = state
                .lt
                .npd_rescore(
                    bl,
                    src,
                    m,
                    cfg.candidates,
                    cfg.decode_temperature,
                    &mut rng,
                    &mut stats,
                )
                .map_err(CliError::Other)?;
            rescored.push(y);
        }
        let acc = refs.as_ref().map(|r| accuracy_with_eos(&rescored, r));
        outputs = rescored;
        acc
    } else {
        None
    };

    // optional autoregressive baseline timing over the same set (b = 1)
    let baseline = if args.with_baseline_timing {
        let bl = state
            .baseline
            .as_ref()
            .ok_or_else(|| CliError::Config(anyhow::anyhow!("baseline timing needs a baseline in the checkpoint")))?;
        let mut steps = 0u64;
        let t0 = Instant::now();
        for src in &sources {
            let (x, x_mask, b, k) = pack_sources(&[src.clone()]);
            bl.greedy_decode(&x, &x_mask, b, k, cfg.model.max_tgt_len, None, &mut steps)
                .map_err(CliError::Other)?;
        }
        let elapsed = t0.elapsed().as_secs_f64();
        Some(BaselineTiming {
            sentences: sources.len(),
            per_sentence_ms: elapsed * 1e3 / sources.len() as f64,
            ar_sequential: steps,
        })
    } else {
        None
    };

    let text = runner::detokenize_all(data.vocab(), &outputs);
    if let Some(path) = args.out {
        std::fs::write(path, text.join("\n") + "\n").map_err(|e| CliError::Other(e.into()))?;
    }
    let report = DecodeReport {
        sentences: sources.len(),
        mode: format!("{:?}", args.mode),
        timings,
        baseline,
        token_accuracy: token_acc,
        npd_token_accuracy: npd_acc,
    };
    Ok((text, report))
}

fn accuracy_with_eos(outputs: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    let with_eos = |rows: &[Vec<u32>]| -> Vec<Vec<u32>> {
        rows.iter()
            .map(|r| {
                let mut v = strip_pad(r);
                v.push(latseq::data::EOS);
                v
            })
            .collect()
    };
    token_accuracy(&with_eos(outputs), &with_eos(refs))
}

fn predict_length(state: &TrainState, src: &[u32], _c: usize) -> Result<usize, CliError> {
    let (x, x_mask, b, k) = pack_sources(&[src.to_vec()]);
    let mut g = latseq::tensor::Graph::new();
    let x_enc = state
        .lt
        .predictor
        .encode_source(&mut g, &state.lt.lp_params, &x, b, k, Some(&x_mask))
        .map_err(CliError::Other)?;
    let ms = state
        .lt
        .predictor
        .predict_lengths(&mut g, &state.lt.lp_params, x_enc, &x_mask)
        .map_err(CliError::Other)?;
    Ok(ms[0])
}
