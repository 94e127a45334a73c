//! `train`: run the joint objective, stream JSONL metrics, write periodic
//! checkpoints. Aborts with a diagnostic dump on non-finite loss.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use latseq::model::{ArBaseline, LatentTransformer};
use latseq::train::Trainer;

use crate::checkpoint::{self, TrainState};
use crate::config::RunConfig;
use crate::metrics::{MetricsRecord, MetricsWriter};
use crate::runner::{DataSource, DirLock};
use crate::CliError;

pub struct TrainOutcome {
    pub final_step: u64,
    pub checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

pub fn run(mut cfg: RunConfig, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let _lock = DirLock::acquire(out_dir).map_err(CliError::Config)?;
    let data = DataSource::new(&mut cfg).map_err(CliError::Config)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let (mut state, mut metrics) = match resume {
        Some(ckpt) => {
            let state = checkpoint::load(ckpt, &cfg.model, cfg.lr, cfg.steps, cfg.baseline)
                .map_err(CliError::Config)?;
            let metrics = MetricsWriter::append(&metrics_path).map_err(CliError::Other)?;
            (state, metrics)
        }
        None => {
            let lt = LatentTransformer::new(cfg.model.clone())
                .map_err(|e| CliError::Config(e.into()))?;
            let baseline = cfg.baseline.then(|| ArBaseline::new(&cfg.model));
            let trainer = Trainer::new(cfg.lr, cfg.seed, cfg.steps);
            let metrics = MetricsWriter::create(&metrics_path).map_err(CliError::Other)?;
            (
                TrainState { lt, baseline, trainer, step: 0 },
                metrics,
            )
        }
    };

    let n_d = state.lt.bottleneck.n_d();
    let k_prime = state.lt.bottleneck.k_prime();
    let mut window_hist = vec![vec![0u64; k_prime]; n_d];
    let mut last = None;

    while state.step < cfg.steps {
        let step = state.step;
        let b = data.train_batch(&cfg, step).map_err(CliError::Other)?;
        let m = state
            .trainer
            .step(&mut state.lt, state.baseline.as_mut(), &b, step)
            .map_err(|e| numeric_abort(e, last.as_ref(), &state, out_dir))?;
        for row in m.slice_indices.chunks_exact(n_d) {
            for (i, &idx) in row.iter().enumerate() {
                window_hist[i][idx as usize] += 1;
            }
        }
        state.step += 1;

        if state.step % cfg.eval_cadence == 0 {
            let usage: Vec<f64> = window_hist
                .iter()
                .map(|h| h.iter().filter(|&&c| c > 0).count() as f64 / k_prime as f64)
                .collect();
            let rec = MetricsRecord {
                step: state.step,
                l_r: m.l_r,
                l_lp: m.l_lp,
                aux: m.aux,
                len_loss: m.len_loss,
                joint: m.joint,
                log_pplx: m.l_r,
                usage,
                baseline_ce: m.baseline_ce,
            };
            metrics.write(&rec).map_err(CliError::Other)?;
            window_hist = vec![vec![0u64; k_prime]; n_d];
        }
        if state.step % cfg.checkpoint_cadence == 0 && state.step < cfg.steps {
            let path = out_dir.join(format!("ckpt-{}.lsq", state.step));
            checkpoint::save(&path, &state, &cfg.echo).map_err(CliError::Other)?;
        }
        last = Some(m);
    }

    let final_path = out_dir.join("ckpt-final.lsq");
    checkpoint::save(&final_path, &state, &cfg.echo).map_err(CliError::Other)?;
    Ok(TrainOutcome {
        final_step: state.step,
        checkpoint: final_path,
        metrics_path,
    })
}

/// Non-finite loss: dump last-step statistics next to the run and abort.
fn numeric_abort(
    err: latseq::Error,
    last: Option<&latseq::train::StepMetrics>,
    state: &TrainState,
    out_dir: &Path,
) -> CliError {
    let mut dump = format!("aborted: {err}\n");
    if let Some(m) = last {
        dump.push_str(&format!(
            "last completed step: l_r={} l_lp={} aux={} joint={}\n",
            m.l_r, m.l_lp, m.aux, m.joint
        ));
    }
    for (setname, set) in [("ae", &state.lt.params), ("lp", &state.lt.lp_params)] {
        let mut max_abs: f64 = 0.0;
        let mut nonfinite = 0usize;
        for (_, _, _, vals) in set.iter() {
            for &v in vals {
                if v.is_finite() {
                    max_abs = max_abs.max(v.abs());
                } else {
                    nonfinite += 1;
                }
            }
        }
        dump.push_str(&format!(
            "{setname} params: max|w| = {max_abs:.3e}, non-finite entries = {nonfinite}\n"
        ));
    }
    let path = out_dir.join("abort-dump.txt");
    std::fs::write(&path, &dump)
        .with_context(|| format!("writing {}", path.display()))
        .ok();
    eprintln!("{dump}");
    CliError::Numeric(err.into())
}
