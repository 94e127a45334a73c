//! Optimizer and the joint training step.
//!
//! One step runs up to three independent graphs in a fixed order: the
//! reconstruction objective l_r (+ commitment) on the autoencoder parameters,
//! the latent prediction objective l_lp (+ length loss) on the predictor
//! parameters with the current codes as constant targets, and optionally the
//! autoregressive baseline's cross-entropy. DVQ codebooks update by EMA
//! outside every gradient graph.

use crate::bottleneck::Mode;
use crate::data::EncodedBatch;
use crate::error::{Error, Result};
use crate::model::{pretrain_gate, ArBaseline, LatentTransformer};
use crate::rng::CounterRng;
use crate::tensor::{Graph, ParamSet};

/// Adam with bias correction. beta2 = 0.98 follows the transformer training
/// convention; the reference work does not pin optimizer settings.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn ensure(&mut self, params: &ParamSet) {
        while self.m.len() < params.len() {
            let i = self.m.len();
            let n = params.shape(crate::tensor::ParamId(i)).iter().product();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
    }

    /// Apply one update from accumulated gradients (absent entries skip).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(crate::tensor::ParamId, Vec<f64>)]) {
        self.ensure(params);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pid, grad) in grads {
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            for (j, &g) in grad.iter().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
            }
            let (lr, eps) = (self.lr, self.eps);
            params.update(*pid, |w| {
                for (j, wj) in w.iter_mut().enumerate() {
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    *wj -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
    }

    pub fn state(&self) -> (u64, &[Vec<f64>], &[Vec<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Metrics and code assignments from one training step.
#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub l_r: f64,
    pub aux: f64,
    pub l_lp: f64,
    pub len_loss: f64,
    pub baseline_ce: Option<f64>,
    /// l_r + l_lp, the joint objective (no hidden weighting).
    pub joint: f64,
    /// Per-position slice indices of this step's codes (rows x n_d).
    pub slice_indices: Vec<u32>,
}

pub struct Trainer {
    pub adam_ae: Adam,
    pub adam_lp: Adam,
    pub adam_bl: Adam,
    /// Per-run noise source for bottleneck stochasticity; its counter is part
    /// of the checkpointed state.
    pub noise: CounterRng,
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(lr: f64, seed: u64, total_steps: u64) -> Self {
        Trainer {
            adam_ae: Adam::new(lr),
            adam_lp: Adam::new(lr),
            adam_bl: Adam::new(lr),
            noise: CounterRng::new(seed, 0x4015E),
            total_steps,
        }
    }

    /// One deterministic joint step at `step`; returns the step's metrics.
    pub fn step(
        &mut self,
        lt: &mut LatentTransformer,
        baseline: Option<&mut ArBaseline>,
        batch: &EncodedBatch,
        step: u64,
    ) -> Result<StepMetrics> {
        let feed = pretrain_gate(step, &lt.cfg);
        let temperature = lt.cfg.temperature_at(step, self.total_steps);

        // reconstruction objective on the autoencoder parameters
        let mut g = Graph::new();
        let recon = lt.recon_forward(
            &mut g,
            batch,
            Mode::Train,
            feed,
            temperature,
            Some(&mut self.noise),
        )?;
        let l_r_val = g.values(recon.l_r)[0];
        let mut loss = recon.l_r;
        let aux_val = match recon.aux {
            Some(aux) => {
                let v = g.values(aux)[0];
                loss = g.add(loss, aux)?;
                v
            }
            None => 0.0,
        };
        guard_finite(l_r_val + aux_val, step, "l_r + aux")?;
        let grads = g.backward(loss)?;
        let collected: Vec<_> = grads
            .params()
            .map(|(pid, g)| (pid, g.to_vec()))
            .collect();
        drop(g);
        self.adam_ae.step(&mut lt.params, &collected);

        // EMA codebook update from the same forward pass's assignments
        if let Some(book) = lt.bottleneck.codebook.as_mut() {
            let rows = recon.enc_rows.len() / lt.cfg.d_model;
            book.ema_update(&recon.enc_rows, rows, &recon.slice_indices);
        }

        // latent prediction objective on the predictor parameters;
        // targets are this step's codes, as constants
        let mut g = Graph::new();
        let (l_lp, len_loss) = lt.lp_forward_loss(&mut g, batch, &recon.slice_indices, recon.m)?;
        let l_lp_val = g.values(l_lp)[0];
        let len_val = g.values(len_loss)[0];
        guard_finite(l_lp_val + len_val, step, "l_lp")?;
        let total = g.add(l_lp, len_loss)?;
        let grads = g.backward(total)?;
        let collected: Vec<_> = grads
            .params()
            .map(|(pid, g)| (pid, g.to_vec()))
            .collect();
        drop(g);
        self.adam_lp.step(&mut lt.lp_params, &collected);

        // optional autoregressive baseline
        let baseline_ce = match baseline {
            Some(bl) => {
                let mut g = Graph::new();
                let ce = bl.loss(
                    &mut g,
                    &batch.x,
                    &batch.x_mask,
                    batch.b,
                    batch.src_len,
                    &batch.y,
                    batch.tgt_len,
                )?;
                let v = g.values(ce)[0];
                guard_finite(v, step, "baseline")?;
                let grads = g.backward(ce)?;
                let collected: Vec<_> = grads
                    .params()
                    .map(|(pid, g)| (pid, g.to_vec()))
                    .collect();
                drop(g);
                self.adam_bl.step(&mut bl.params, &collected);
                Some(v)
            }
            None => None,
        };

        Ok(StepMetrics {
            l_r: l_r_val,
            aux: aux_val,
            l_lp: l_lp_val,
            len_loss: len_val,
            baseline_ce,
            joint: l_r_val + l_lp_val,
            slice_indices: recon.slice_indices,
        })
    }
}

fn guard_finite(v: f64, step: u64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}
