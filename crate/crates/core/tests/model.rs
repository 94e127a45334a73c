//! Model-level properties: shape laws, residual identity, conditional
//! independence of parallel outputs, straight-through training, pretraining
//! gate, and full-model gradient checks against finite differences.

use latseq::bottleneck::{BottleneckKind, Mode};
use latseq::data::{batch, EncodedBatch, TaskGen, TaskKind, TaskSpec, PAD};
use latseq::model::{
    pack_sources, pretrain_gate, DecodeMode, DecodeStats, DecoderFeed, LatentTransformer,
    LengthMode, ModelConfig, ResidualConvBlock,
};
use latseq::rng::CounterRng;
use latseq::tensor::check::{finite_difference, max_rel_error};
use latseq::tensor::{Graph, ParamSet};
use latseq::train::Trainer;

fn tiny_cfg(kind: BottleneckKind, c: u32) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        heads: 2,
        ff_mult: 2,
        log2_k: 4,
        n_d: 2,
        bottleneck: kind,
        compression_exp: c,
        enc_layers: 1,
        dec_layers: 1,
        lp_layers: 1,
        pretrain_steps: 2,
        src_vocab: 8,
        tgt_vocab: 8,
        max_src_len: 24,
        max_tgt_len: 24,
        seed: 11,
        ..ModelConfig::default()
    }
}

fn toy_batch(cfg: &ModelConfig, b: usize, len: usize, seed: u64) -> EncodedBatch {
    let gen = TaskGen::new(TaskSpec {
        kind: TaskKind::Copy,
        vocab_size: cfg.tgt_vocab,
        min_len: len,
        max_len: len,
        seed,
    })
    .unwrap();
    batch(&gen.take(0, b), cfg.compression(), cfg.max_tgt_len).unwrap()
}

#[test]
fn residual_block_with_zero_convs_is_identity() {
    let mut ps = ParamSet::new();
    let mut rng = CounterRng::new(1, 1);
    let block = ResidualConvBlock::new("res", 4, &mut ps, &mut rng);
    for i in 0..3 {
        let w = ps.find(&format!("res.conv{i}.w")).unwrap();
        ps.set(w, vec![0.0; 12 * 4]);
    }
    let mut g = Graph::new();
    let x = g.constant(&[2, 5, 4], (0..40).map(|i| i as f64 * 0.1 - 2.0).collect());
    let y = block.apply(&mut g, &ps, x).unwrap();
    assert_eq!(g.values(y), g.values(x));
    assert_eq!(g.shape(y), g.shape(x));
}

#[test]
fn residual_block_gradcheck() {
    let mut ps = ParamSet::new();
    let mut rng = CounterRng::new(2, 1);
    let block = ResidualConvBlock::new("res", 4, &mut ps, &mut rng);
    let x_vals: Vec<f64> = (0..1 * 6 * 4).map(|_| rng.uniform_range(-1.0, 1.0)).collect();

    let run = |ps: &ParamSet, x_vals: &[f64]| {
        let mut g = Graph::new();
        let x = g.constant(&[1, 6, 4], x_vals.to_vec());
        let y = block.apply(&mut g, ps, x).unwrap();
        let sq = g.mul(y, y).unwrap();
        let loss = g.sum(sq);
        (g, x, loss)
    };
    let (g, x, loss) = run(&ps, &x_vals);
    let grads = g.backward(loss).unwrap();
    let analytic = grads.wrt(x).unwrap().to_vec();
    let mut f = |v: &[f64]| {
        let (g, _, loss) = run(&ps, v);
        g.values(loss)[0]
    };
    let numeric = finite_difference(&mut f, &x_vals, 1e-5);
    assert!(max_rel_error(&analytic, &numeric) <= 1e-4);
}

#[test]
fn shape_law_compress_and_restore() {
    // n = 16, c = 3 -> m = 2 (the n/m = 8 operating point); ad restores 16
    let cfg = tiny_cfg(BottleneckKind::SemHash, 3);
    let lt = LatentTransformer::new(cfg.clone()).unwrap();
    let b = toy_batch(&cfg, 2, 13, 3); // 13 + eos = 14 -> padded to 16
    assert_eq!(b.tgt_len, 16);
    let mut g = Graph::new();
    let out = lt
        .recon_forward(&mut g, &b, Mode::Eval, DecoderFeed::Latents, 1.0, None)
        .unwrap();
    assert_eq!(out.m, 2);
    assert_eq!(g.shape(out.logits), &[2, 16, cfg.tgt_vocab]);

    // c = 0 degenerate: bottleneck at full length
    let cfg0 = tiny_cfg(BottleneckKind::SemHash, 0);
    let lt0 = LatentTransformer::new(cfg0.clone()).unwrap();
    let b0 = toy_batch(&cfg0, 1, 5, 3);
    let mut g = Graph::new();
    let out0 = lt0
        .recon_forward(&mut g, &b0, Mode::Eval, DecoderFeed::Latents, 1.0, None)
        .unwrap();
    assert_eq!(out0.m, b0.tgt_len);
}

#[test]
fn pretrain_gate_boundary() {
    let cfg = tiny_cfg(BottleneckKind::SemHash, 1);
    assert_eq!(pretrain_gate(0, &cfg), DecoderFeed::TeacherForced);
    assert_eq!(pretrain_gate(1, &cfg), DecoderFeed::TeacherForced);
    assert_eq!(pretrain_gate(2, &cfg), DecoderFeed::Latents); // boundary exclusive
}

#[test]
fn parallel_outputs_depend_only_on_latents_and_source() {
    // bit-exact reproducibility of the decode pass, and causal locality of
    // the decoder input stream
    let cfg = tiny_cfg(BottleneckKind::SemHash, 1);
    let lt = LatentTransformer::new(cfg.clone()).unwrap();
    let sources: Vec<Vec<u32>> = vec![vec![4, 5, 6, 7, 4, 5, 6]];
    let (x, x_mask, b, k) = pack_sources(&sources);

    let run = |perturb: Option<(usize, f64)>| -> Vec<f64> {
        let mut g = Graph::new();
        let x_enc = lt
            .autoencoder
            .encode_source(&mut g, &lt.params, &x, b, k, Some(&x_mask))
            .unwrap();
        let n = 8usize;
        let mut inputs: Vec<f64> = (0..n * cfg.d_model)
            .map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5)
            .collect();
        if let Some((j, delta)) = perturb {
            for q in 0..cfg.d_model {
                inputs[j * cfg.d_model + q] += delta;
            }
        }
        let inp = g.constant(&[1, n, cfg.d_model], inputs);
        let logits = lt
            .autoencoder
            .decode(&mut g, &lt.params, inp, x_enc, Some(&x_mask))
            .unwrap();
        g.values(logits).to_vec()
    };

    let base = run(None);
    let again = run(None);
    assert_eq!(base, again, "same latents and source must be bit-identical");

    let j = 4;
    let poked = run(Some((j, 0.25)));
    let v = cfg.tgt_vocab;
    for t in 0..=j {
        assert_eq!(
            &base[t * v..(t + 1) * v],
            &poked[t * v..(t + 1) * v],
            "logits before the perturbed input position must not move"
        );
    }
    assert!(
        base[(j + 1) * v..] != poked[(j + 1) * v..],
        "logits after the perturbed position should change"
    );
}

#[test]
fn every_compress_path_parameter_gets_gradient_through_bottlenecks() {
    for kind in [
        BottleneckKind::SemHash,
        BottleneckKind::DvqSliced,
        BottleneckKind::GumbelSoftmax,
    ] {
        let cfg = tiny_cfg(kind, 1);
        let lt = LatentTransformer::new(cfg.clone()).unwrap();
        let b = toy_batch(&cfg, 3, 7, 5);
        let mut noise = CounterRng::new(9, 9);
        let mut g = Graph::new();
        let out = lt
            .recon_forward(
                &mut g,
                &b,
                Mode::Train,
                DecoderFeed::Latents,
                0.7,
                Some(&mut noise),
            )
            .unwrap();
        let mut loss = out.l_r;
        if let Some(aux) = out.aux {
            loss = g.add(loss, aux).unwrap();
        }
        let grads = g.backward(loss).unwrap();
        let by_param: std::collections::HashMap<usize, Vec<f64>> = grads
            .params()
            .map(|(pid, g)| (pid.0, g.to_vec()))
            .collect();
        for (pid, name, _, _) in lt.params.iter() {
            let on_compress_path = name.starts_with("ae.");
            if !on_compress_path {
                continue;
            }
            let grad = by_param.get(&pid.0);
            assert!(
                grad.is_some_and(|g| g.iter().any(|&v| v != 0.0)),
                "{kind:?}: {name} received no gradient"
            );
        }
    }
}

#[test]
fn zeroed_output_head_gives_uniform_logits() {
    let cfg = tiny_cfg(BottleneckKind::SemHash, 1);
    let lt = LatentTransformer::new(cfg.clone()).unwrap();
    let mut params_zeroed = LatentTransformer::new(cfg.clone()).unwrap();
    let w = params_zeroed.params.find("dec.out.w").unwrap();
    let b_ = params_zeroed.params.find("dec.out.b").unwrap();
    params_zeroed
        .params
        .set(w, vec![0.0; cfg.d_model * cfg.tgt_vocab]);
    params_zeroed.params.set(b_, vec![0.0; cfg.tgt_vocab]);
    let _ = lt;

    let b = toy_batch(&cfg, 1, 6, 2);
    let mut g = Graph::new();
    let out = params_zeroed
        .recon_forward(&mut g, &b, Mode::Eval, DecoderFeed::Latents, 1.0, None)
        .unwrap();
    for row in g.values(out.logits).chunks_exact(cfg.tgt_vocab) {
        assert!(row.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn identity_bottleneck_c0_learns_copy_quickly() {
    let mut cfg = tiny_cfg(BottleneckKind::Identity, 0);
    cfg.d_model = 16;
    cfg.pretrain_steps = 0;
    let mut lt = LatentTransformer::new(cfg.clone()).unwrap();
    let mut trainer = Trainer::new(3e-3, 42, 200);
    let gen = TaskGen::new(TaskSpec {
        kind: TaskKind::Copy,
        vocab_size: cfg.tgt_vocab,
        min_len: 4,
        max_len: 8,
        seed: 13,
    })
    .unwrap();
    let mut first = None;
    let mut last = 0.0;
    for step in 0..200u64 {
        let pairs = gen.take(step * 4, 4);
        let b = batch(&pairs, 1, cfg.max_tgt_len).unwrap();
        let m = trainer.step(&mut lt, None, &b, step).unwrap();
        if first.is_none() {
            first = Some(m.l_r);
        }
        last = m.l_r;
    }
    let first = first.unwrap();
    assert!(
        last < first * 0.5,
        "loss should drop on copy within 200 steps: first {first}, last {last}"
    );
}

#[test]
fn model_gradcheck_against_finite_differences() {
    // reconstruction path (soft gumbel keeps the whole graph differentiable;
    // the noise stream is replayed identically for every probe)
    let cfg = tiny_cfg(BottleneckKind::GumbelSoftmax, 1);
    let lt = LatentTransformer::new(cfg.clone()).unwrap();
    let b = toy_batch(&cfg, 2, 5, 7);

    let eval_loss = |params: &ParamSet| -> f64 {
        let mut noise = CounterRng::new(123, 77);
        let mut g = Graph::new();
        let x_enc = lt
            .autoencoder
            .encode_source(&mut g, params, &b.x, b.b, b.src_len, Some(&b.x_mask))
            .unwrap();
        let y_emb = lt
            .autoencoder
            .embed_targets(&mut g, params, &b.y, b.b, b.tgt_len)
            .unwrap();
        let enc = lt
            .autoencoder
            .compress(&mut g, params, y_emb, x_enc, Some(&b.x_mask))
            .unwrap();
        let io = lt
            .bottleneck
            .forward(&mut g, params, enc, Mode::Train, 0.8, Some(&mut noise))
            .unwrap();
        let logits = lt
            .autoencoder
            .reconstruct_logits(
                &mut g,
                params,
                io.z_q,
                y_emb,
                x_enc,
                Some(&b.x_mask),
                DecoderFeed::Latents,
            )
            .unwrap();
        let l_r = lt
            .autoencoder
            .reconstruction_loss(&mut g, logits, &b.y, PAD)
            .unwrap();
        g.values(l_r)[0]
    };

    // analytic gradients once
    let mut noise = CounterRng::new(123, 77);
    let mut g = Graph::new();
    let out = lt
        .recon_forward(
            &mut g,
            &b,
            Mode::Train,
            DecoderFeed::Latents,
            0.8,
            Some(&mut noise),
        )
        .unwrap();
    let grads = g.backward(out.l_r).unwrap();
    let by_param: std::collections::HashMap<usize, Vec<f64>> =
        grads.params().map(|(pid, g)| (pid.0, g.to_vec())).collect();

    for name in ["ae.compress0.w", "ae.attn.q.w", "ae.bottleneck.gumbel.w", "dec.out.b"] {
        let pid = lt.params.find(name).unwrap();
        let analytic = by_param
            .get(&pid.0)
            .unwrap_or_else(|| panic!("{name}: no gradient"))
            .clone();
        let base = lt.params.values(pid).to_vec();
        let mut probe_params = LatentTransformer::new(cfg.clone()).unwrap().params;
        // keep probe params identical to lt's
        for (other_pid, _, _, vals) in lt.params.iter() {
            probe_params.set(other_pid, vals.to_vec());
        }
        let mut f = |v: &[f64]| {
            probe_params.set(pid, v.to_vec());
            eval_loss(&probe_params)
        };
        let numeric = finite_difference(&mut f, &base, 1e-5);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-4, "{name}: rel err {err:.2e}");
    }
}

#[test]
fn lp_gradcheck_against_finite_differences() {
    let cfg = tiny_cfg(BottleneckKind::SemHash, 1);
    let lt = LatentTransformer::new(cfg.clone()).unwrap();
    let b = toy_batch(&cfg, 2, 5, 9);
    let m = b.tgt_len / cfg.compression();
    let n_d = lt.bottleneck.n_d();
    let slice_targets: Vec<u32> = (0..b.b * m * n_d).map(|i| (i % 2) as u32).collect();

    let eval_loss = |params: &ParamSet| -> f64 {
        let mut g = Graph::new();
        let x_enc = lt
            .predictor
            .encode_source(&mut g, params, &b.x, b.b, b.src_len, Some(&b.x_mask))
            .unwrap();
        let l = lt
            .predictor
            .loss(&mut g, params, x_enc, Some(&b.x_mask), &slice_targets, b.b, m)
            .unwrap();
        g.values(l)[0]
    };

    let mut g = Graph::new();
    let (l_lp, _len) = lt.lp_forward_loss(&mut g, &b, &slice_targets, m).unwrap();
    let grads = g.backward(l_lp).unwrap();
    let by_param: std::collections::HashMap<usize, Vec<f64>> =
        grads.params().map(|(pid, g)| (pid.0, g.to_vec())).collect();

    for name in ["lp.head0.w", "lp.slice1.table", "lp.block0.cross.q.w"] {
        let pid = lt.lp_params.find(name).unwrap();
        let analytic = by_param
            .get(&pid.0)
            .unwrap_or_else(|| panic!("{name}: no gradient"))
            .clone();
        let base = lt.lp_params.values(pid).to_vec();
        let mut probe = LatentTransformer::new(cfg.clone()).unwrap().lp_params;
        for (other_pid, _, _, vals) in lt.lp_params.iter() {
            probe.set(other_pid, vals.to_vec());
        }
        let mut f = |v: &[f64]| {
            probe.set(pid, v.to_vec());
            eval_loss(&probe)
        };
        let numeric = finite_difference(&mut f, &base, 1e-5);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-4, "{name}: rel err {err:.2e}");
    }
}

#[test]
fn lp_training_leaves_autoencoder_parameters_untouched() {
    let cfg = tiny_cfg(BottleneckKind::SemHash, 1);
    let mut lt = LatentTransformer::new(cfg.clone()).unwrap();
    let b = toy_batch(&cfg, 2, 5, 1);
    let m = b.tgt_len / cfg.compression();
    let n_d = lt.bottleneck.n_d();
    let targets: Vec<u32> = (0..b.b * m * n_d).map(|i| (i % 2) as u32).collect();

    let ae_hash_before = lt.params.content_hash();
    let mut adam = latseq::train::Adam::new(1e-2);
    for _ in 0..5 {
        let mut g = Graph::new();
        let (l_lp, len_loss) = lt.lp_forward_loss(&mut g, &b, &targets, m).unwrap();
        let total = g.add(l_lp, len_loss).unwrap();
        let grads = g.backward(total).unwrap();
        let collected: Vec<_> = grads.params().map(|(p, g)| (p, g.to_vec())).collect();
        drop(g);
        adam.step(&mut lt.lp_params, &collected);
    }
    assert_eq!(
        lt.params.content_hash(),
        ae_hash_before,
        "autoencoder parameters must be bit-identical after lp-only training"
    );
}

#[test]
fn decode_modes_and_step_counts() {
    let cfg = tiny_cfg(BottleneckKind::SemHash, 2);
    let lt = LatentTransformer::new(cfg.clone()).unwrap();
    let sources: Vec<Vec<u32>> = vec![vec![4, 5, 6, 7, 5, 4, 7], vec![5, 5, 6, 6, 7, 7, 4]];
    let ms = vec![2usize, 2];

    let mut rng = CounterRng::new(1, 1);
    let mut stats = DecodeStats::default();
    let out1 = lt
        .full_decode(
            &sources,
            &LengthMode::Oracle(ms.clone()),
            DecodeMode::Greedy,
            &mut rng,
            &mut stats,
        )
        .unwrap();
    assert_eq!(stats.lp_sequential, 2, "one invocation per latent position");
    assert_eq!(stats.ad_passes, 1);

    // greedy is deterministic; topk(1) equals greedy
    let mut rng2 = CounterRng::new(999, 7);
    let mut s2 = DecodeStats::default();
    let out2 = lt
        .full_decode(
            &sources,
            &LengthMode::Oracle(ms.clone()),
            DecodeMode::Greedy,
            &mut rng2,
            &mut s2,
        )
        .unwrap();
    assert_eq!(out1, out2);
    let mut rng3 = CounterRng::new(5, 5);
    let mut s3 = DecodeStats::default();
    let out3 = lt
        .full_decode(
            &sources,
            &LengthMode::Oracle(ms),
            DecodeMode::TopK { k: 1 },
            &mut rng3,
            &mut s3,
        )
        .unwrap();
    assert_eq!(out1, out3);

    // k < 1 is an error
    let mut s4 = DecodeStats::default();
    assert!(lt
        .full_decode(
            &sources,
            &LengthMode::Predicted,
            DecodeMode::TopK { k: 0 },
            &mut rng3,
            &mut s4,
        )
        .is_err());
}

#[test]
fn lp_next_code_distribution_sums_to_one() {
    let cfg = tiny_cfg(BottleneckKind::SemHash, 1);
    let lt = LatentTransformer::new(cfg).unwrap();
    let (x, x_mask, _, k) = pack_sources(&[vec![4, 5, 6]]);
    // empty prefix: distribution from the start vector only
    let dist = lt
        .predictor
        .next_code_distribution(&lt.lp_params, &x, &x_mask, k, &[])
        .unwrap();
    assert_eq!(dist.len(), 16);
    let total: f64 = dist.iter().sum();
    assert!((total - 1.0).abs() < 1e-12, "sums to {total}");

    let dist2 = lt
        .predictor
        .next_code_distribution(&lt.lp_params, &x, &x_mask, k, &[1, 0, 0, 1])
        .unwrap();
    let total2: f64 = dist2.iter().sum();
    assert!((total2 - 1.0).abs() < 1e-12);
}

#[test]
fn training_is_bit_deterministic_for_100_steps() {
    let run = || -> Vec<u64> {
        let cfg = tiny_cfg(BottleneckKind::SemHash, 1);
        let mut lt = LatentTransformer::new(cfg.clone()).unwrap();
        let mut trainer = Trainer::new(1e-3, 7, 100);
        let gen = TaskGen::new(TaskSpec {
            kind: TaskKind::Copy,
            vocab_size: cfg.tgt_vocab,
            min_len: 3,
            max_len: 6,
            seed: 21,
        })
        .unwrap();
        (0..100u64)
            .map(|step| {
                let b = batch(&gen.take(step * 2, 2), cfg.compression(), cfg.max_tgt_len).unwrap();
                let m = trainer.step(&mut lt, None, &b, step).unwrap();
                (m.l_r + m.l_lp).to_bits()
            })
            .collect()
    };
    assert_eq!(run(), run(), "equal seeds must give bit-identical losses");
}
