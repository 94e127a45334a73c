//! Bottleneck behavior against independent oracles: brute-force EMA updates,
//! brute-force nearest-neighbor assignment, a direct VQ-VAE reference for the
//! single-slice case, and the straight-through gradient contract.

use latseq::bottleneck::{
    assemble_rows, compose_code, Bottleneck, BottleneckKind, Codebook, DvqVariant, Mode,
};
use latseq::rng::CounterRng;
use latseq::tensor::{Graph, ParamSet};

fn new_bottleneck(
    kind: BottleneckKind,
    d: usize,
    log2_k: u32,
    n_d: usize,
    decay: f64,
) -> (Bottleneck, ParamSet) {
    let mut params = ParamSet::new();
    let mut rng = CounterRng::new(0xb0_77, 0);
    let b = Bottleneck::new(
        kind, d, log2_k, n_d, decay, 0.25, true, "bn", &mut params, &mut rng,
    )
    .unwrap();
    (b, params)
}

// ---- oracle implementations (plain loops, forward-only) ----

fn oracle_slice_inputs(
    enc: &[f64],
    rows: usize,
    d: usize,
    n_d: usize,
    projections: Option<&[Vec<f64>]>,
) -> Vec<Vec<f64>> {
    let ds = d / n_d;
    let mut out = vec![Vec::new(); n_d];
    for r in 0..rows {
        let row = &enc[r * d..(r + 1) * d];
        for i in 0..n_d {
            match projections {
                None => out[i].extend_from_slice(&row[i * ds..(i + 1) * ds]),
                Some(ps) => {
                    for j in 0..ds {
                        let mut acc = 0.0;
                        for q in 0..d {
                            acc += row[q] * ps[i][q * ds + j];
                        }
                        out[i].push(acc);
                    }
                }
            }
        }
    }
    out
}

fn oracle_nearest(table: &[f64], k: usize, ds: usize, x: &[f64]) -> u32 {
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for j in 0..k {
        let mut dist = 0.0;
        for q in 0..ds {
            let diff = x[q] - table[j * ds + q];
            dist += diff * diff;
        }
        if dist < best_d {
            best_d = dist;
            best = j as u32;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn oracle_ema(
    table: &mut [f64],
    counts: &mut [f64],
    k: usize,
    ds: usize,
    lambda: f64,
    inputs: &[f64],
    rows: usize,
    assigned: &[u32],
) {
    for j in 0..k {
        let mut n = 0.0;
        let mut sum = vec![0.0; ds];
        for r in 0..rows {
            if assigned[r] as usize == j {
                n += 1.0;
                for q in 0..ds {
                    sum[q] += inputs[r * ds + q];
                }
            }
        }
        counts[j] = lambda * counts[j] + (1.0 - lambda) * n;
        for q in 0..ds {
            table[j * ds + q] =
                lambda * table[j * ds + q] + (1.0 - lambda) * sum[q] / counts[j];
        }
    }
}

#[test]
fn ema_and_assignment_match_oracle_on_random_batches() {
    let mut rng = CounterRng::new(991, 3);
    for trial in 0..100 {
        let variant = if trial % 2 == 0 {
            DvqVariant::Sliced
        } else {
            DvqVariant::Projected
        };
        let n_d = [1usize, 2, 4][trial % 3];
        let d = 8 * n_d;
        let log2_k = (2 * n_d) as u32;
        let mut book = Codebook::new(d, log2_k, n_d, 0.95, variant, &mut rng).unwrap();
        let rows = 3 + trial % 9;
        let enc: Vec<f64> = (0..rows * d).map(|_| rng.gaussian()).collect();

        // independent assignment
        let projections: Option<Vec<Vec<f64>>> = match variant {
            DvqVariant::Sliced => None,
            DvqVariant::Projected => Some(
                (0..n_d)
                    .map(|i| book.projection(i).unwrap().to_vec())
                    .collect(),
            ),
        };
        let sliced = oracle_slice_inputs(&enc, rows, d, n_d, projections.as_deref());
        let ds = d / n_d;
        let mut expect_idx = vec![0u32; rows * n_d];
        for i in 0..n_d {
            for r in 0..rows {
                expect_idx[r * n_d + i] =
                    oracle_nearest(book.table(i), book.k_prime, ds, &sliced[i][r * ds..(r + 1) * ds]);
            }
        }
        let got_idx = book.assign(&enc, rows);
        assert_eq!(got_idx, expect_idx, "assignment diverged on trial {trial}");

        // independent EMA
        let mut expect_tables: Vec<Vec<f64>> = (0..n_d).map(|i| book.table(i).to_vec()).collect();
        let mut expect_counts: Vec<Vec<f64>> = (0..n_d).map(|i| book.counts(i).to_vec()).collect();
        for i in 0..n_d {
            let per_slice: Vec<u32> = (0..rows).map(|r| got_idx[r * n_d + i]).collect();
            oracle_ema(
                &mut expect_tables[i],
                &mut expect_counts[i],
                book.k_prime,
                ds,
                0.95,
                &sliced[i],
                rows,
                &per_slice,
            );
        }
        book.ema_update(&enc, rows, &got_idx);
        for i in 0..n_d {
            for (a, b) in book.table(i).iter().zip(&expect_tables[i]) {
                assert!((a - b).abs() < 1e-12, "table diverged on trial {trial}");
            }
            for (a, b) in book.counts(i).iter().zip(&expect_counts[i]) {
                assert!((a - b).abs() < 1e-12, "count diverged on trial {trial}");
            }
        }
    }
}

/// Direct single-table VQ-VAE written independently of Codebook.
struct PlainVq {
    table: Vec<f64>,
    k: usize,
    d: usize,
}

impl PlainVq {
    fn quantize(&self, enc: &[f64], rows: usize) -> (Vec<u64>, Vec<f64>) {
        let mut codes = Vec::with_capacity(rows);
        let mut zq = Vec::with_capacity(rows * self.d);
        for r in 0..rows {
            let x = &enc[r * self.d..(r + 1) * self.d];
            let j = oracle_nearest(&self.table, self.k, self.d, x);
            codes.push(j as u64);
            zq.extend_from_slice(&self.table[j as usize * self.d..(j as usize + 1) * self.d]);
        }
        (codes, zq)
    }
}

#[test]
fn single_slice_dvq_reduces_to_plain_vqvae() {
    let (bn, params) = new_bottleneck(BottleneckKind::DvqSliced, 6, 4, 1, 0.999);
    let book = bn.codebook.as_ref().unwrap();
    let plain = PlainVq {
        table: book.table(0).to_vec(),
        k: book.k_prime,
        d: 6,
    };
    let mut rng = CounterRng::new(5, 5);
    let enc: Vec<f64> = (0..8 * 6).map(|_| rng.gaussian()).collect();

    let mut g = Graph::new();
    let enc_t = g.constant(&[2, 4, 6], enc.clone());
    let io = bn
        .forward(&mut g, &params, enc_t, Mode::Eval, 1.0, None)
        .unwrap();
    let (codes, zq) = plain.quantize(&enc, 8);
    assert_eq!(io.z_d, codes);
    assert_eq!(g.values(io.z_q), zq.as_slice());

    // the training-mode straight-through value is z_q up to rounding
    // (computed as enc + (z_q - enc)); codes are identical
    let mut g = Graph::new();
    let enc_t = g.constant(&[2, 4, 6], enc.clone());
    let io = bn
        .forward(&mut g, &params, enc_t, Mode::Train, 1.0, None)
        .unwrap();
    assert_eq!(io.z_d, codes);
    for (a, b) in g.values(io.z_q).iter().zip(&zq) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn dvq_worked_examples() {
    let (mut bn, params) = new_bottleneck(BottleneckKind::DvqSliced, 2, 1, 1, 0.999);
    {
        let book = bn.codebook.as_mut().unwrap();
        let (tables, _, _) = book.state_mut();
        tables[0] = vec![0.0, 0.0, 1.0, 1.0];
    }
    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], vec![0.2, 0.1]);
    let io = bn
        .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
        .unwrap();
    assert_eq!(io.z_d, vec![0]);
    assert_eq!(g.values(io.z_q), &[0.0, 0.0]);

    // tie at (0.5, 0.5) breaks toward the lowest index
    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], vec![0.5, 0.5]);
    let io = bn
        .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
        .unwrap();
    assert_eq!(io.z_d, vec![0]);
}

#[test]
fn straight_through_gradient_is_identity_on_reconstruction_path() {
    for kind in [BottleneckKind::DvqSliced, BottleneckKind::DvqProjected] {
        let (bn, params) = new_bottleneck(kind, 8, 4, 2, 0.999);
        let mut rng = CounterRng::new(17, 0);
        let enc_vals: Vec<f64> = (0..2 * 3 * 8).map(|_| rng.gaussian()).collect();
        let w: Vec<f64> = (0..2 * 3 * 8).map(|_| rng.uniform_range(-1.0, 1.0)).collect();

        let mut g = Graph::new();
        let enc = g.constant(&[2, 3, 8], enc_vals.clone());
        let io = bn
            .forward(&mut g, &params, enc, Mode::Train, 1.0, None)
            .unwrap();
        let wt = g.constant(&[2, 3, 8], w.clone());
        let weighted = g.mul(io.z_q, wt).unwrap();
        let loss = g.sum(weighted);
        let grads = g.backward(loss).unwrap();
        // as if z_q == enc: d(sum(enc * w))/d(enc) = w, exactly
        assert_eq!(grads.wrt(enc).unwrap(), w.as_slice(), "{kind:?}");
    }
}

#[test]
fn commitment_loss_pulls_encoder_toward_codebook() {
    let (bn, params) = new_bottleneck(BottleneckKind::DvqSliced, 4, 2, 1, 0.999);
    let mut g = Graph::new();
    let enc = g.constant(&[1, 2, 4], vec![0.3; 8]);
    let io = bn
        .forward(&mut g, &params, enc, Mode::Train, 1.0, None)
        .unwrap();
    let aux = io.aux_loss.expect("dvq train mode has a commitment term");
    assert!(g.values(aux)[0] > 0.0);
    let grads = g.backward(aux).unwrap();
    let ge = grads.wrt(enc).unwrap();
    assert!(ge.iter().any(|&v| v != 0.0));
    // beta * mean over positions of squared distance, by hand
    let book = bn.codebook.as_ref().unwrap();
    let idx = book.assign(&[0.3; 8], 2);
    let zq = assemble_rows(book, &idx, 2);
    let expect: f64 = zq
        .iter()
        .zip([0.3; 8])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        * 0.25
        / 2.0;
    assert!((g.values(aux)[0] - expect).abs() < 1e-12);
}

#[test]
fn embed_code_reproduces_eval_zq_bit_exactly() {
    let kinds = [
        (BottleneckKind::DvqSliced, 8, 4, 2),
        (BottleneckKind::DvqProjected, 8, 4, 2),
        (BottleneckKind::SemHash, 8, 4, 4),
        (BottleneckKind::GumbelSoftmax, 8, 4, 1),
    ];
    for (kind, d, log2_k, n_d) in kinds {
        let (bn, params) = new_bottleneck(kind, d, log2_k, n_d, 0.999);
        let mut rng = CounterRng::new(23, 1);
        let enc_vals: Vec<f64> = (0..3 * 2 * d).map(|_| rng.gaussian()).collect();
        let mut g = Graph::new();
        let enc = g.constant(&[3, 2, d], enc_vals);
        let io = bn
            .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
            .unwrap();
        let embedded = bn.embed_code(&mut g, &params, &io.z_d, 3, 2).unwrap();
        assert_eq!(g.values(embedded), g.values(io.z_q), "{kind:?}");

        // codes compose from slice indices at every position
        let kp = bn.k_prime();
        for (pos, row) in io.slice_indices.chunks_exact(bn.n_d()).enumerate() {
            assert_eq!(compose_code(row, kp).unwrap(), io.z_d[pos]);
        }
    }
}

#[test]
fn embed_code_rejects_out_of_range() {
    let (bn, params) = new_bottleneck(BottleneckKind::DvqSliced, 4, 2, 1, 0.999);
    let mut g = Graph::new();
    assert!(bn.embed_code(&mut g, &params, &[4], 1, 1).is_err());
}

#[test]
fn gumbel_eval_argmax_and_invariance() {
    let (bn, mut params) = new_bottleneck(BottleneckKind::GumbelSoftmax, 2, 1, 1, 0.999);
    // identity projection makes logits == enc
    let w = params.find("bn.gumbel.w").unwrap();
    params.set(w, vec![1.0, 0.0, 0.0, 1.0]);
    let e = params.find("bn.gumbel.e").unwrap();
    params.set(e, vec![10.0, 20.0, 30.0, 40.0]);

    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], vec![3.0, 1.0]);
    let io = bn
        .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
        .unwrap();
    assert_eq!(io.z_d, vec![0]);
    assert_eq!(g.values(io.z_q), &[10.0, 20.0]);

    // adding a constant to all logits leaves z_d unchanged
    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], vec![3.0 + 7.5, 1.0 + 7.5]);
    let io2 = bn
        .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
        .unwrap();
    assert_eq!(io2.z_d, vec![0]);
}

#[test]
fn gumbel_low_temperature_approaches_one_hot() {
    let (bn, mut params) = new_bottleneck(BottleneckKind::GumbelSoftmax, 2, 1, 1, 0.999);
    let w = params.find("bn.gumbel.w").unwrap();
    params.set(w, vec![1.0, 0.0, 0.0, 1.0]);
    let e = params.find("bn.gumbel.e").unwrap();
    params.set(e, vec![1.0, 0.0, 0.0, 1.0]);

    // replay the same noise stream the bottleneck will consume
    let noise_probe = CounterRng::new(77, 9).fill_gumbel(2);
    let logits = [0.4, 0.1];
    let winner = if logits[0] + noise_probe[0] > logits[1] + noise_probe[1] {
        0
    } else {
        1
    };

    let mut rng = CounterRng::new(77, 9);
    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], logits.to_vec());
    let io = bn
        .forward(&mut g, &params, enc, Mode::Train, 1e-4, Some(&mut rng))
        .unwrap();
    // z_q = w . e with e = I, so z_q is the softmax weight vector itself
    let zq = g.values(io.z_q);
    assert!(zq[winner] > 0.9999, "w should be nearly 1-hot, got {zq:?}");
}

#[test]
fn gumbel_train_requires_positive_temperature() {
    let (bn, params) = new_bottleneck(BottleneckKind::GumbelSoftmax, 2, 1, 1, 0.999);
    let mut rng = CounterRng::new(0, 0);
    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], vec![0.0, 0.0]);
    assert!(bn
        .forward(&mut g, &params, enc, Mode::Train, 0.0, Some(&mut rng))
        .is_err());
}

#[test]
fn semhash_worked_examples() {
    let (bn, mut params) = new_bottleneck(BottleneckKind::SemHash, 2, 2, 2, 0.999);
    // identity projection: proj(enc) = enc
    let proj = params.find("bn.semhash.proj").unwrap();
    params.set(proj, vec![1.0, 0.0, 0.0, 1.0]);

    // saturated positive and negative components round to bits (1,0) -> code 2
    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], vec![10.0, -10.0]);
    let io = bn
        .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
        .unwrap();
    assert_eq!(io.z_d, vec![2]);
    assert_eq!(io.slice_indices, vec![1, 0]);

    // exactly 0.5 (zero input) rounds to bit 0
    let mut g = Graph::new();
    let enc = g.constant(&[1, 1, 2], vec![0.0, 0.0]);
    let io = bn
        .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
        .unwrap();
    assert_eq!(io.z_d, vec![0]);
}

#[test]
fn semhash_equal_embeddings_make_zq_independent_of_bits() {
    let (bn, mut params) = new_bottleneck(BottleneckKind::SemHash, 4, 2, 2, 0.999);
    let e1 = params.find("bn.semhash.e1").unwrap();
    let e2 = params.find("bn.semhash.e2").unwrap();
    let shared: Vec<f64> = (0..8).map(|i| i as f64 * 0.5).collect();
    params.set(e1, shared.clone());
    params.set(e2, shared.clone());

    // column sums of e1, whatever the bits turn out to be
    let expect: Vec<f64> = (0..4).map(|j| shared[j] + shared[4 + j]).collect();
    for seed in [1u64, 2, 3] {
        let mut rng = CounterRng::new(seed, 0);
        let enc_vals: Vec<f64> = (0..4).map(|_| rng.gaussian()).collect();
        let mut g = Graph::new();
        let enc = g.constant(&[1, 1, 4], enc_vals);
        let io = bn
            .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
            .unwrap();
        for (a, b) in g.values(io.z_q).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn semhash_eval_is_deterministic_and_codes_in_range() {
    let (bn, params) = new_bottleneck(BottleneckKind::SemHash, 6, 3, 3, 0.999);
    let mut rng = CounterRng::new(31, 2);
    let enc_vals: Vec<f64> = (0..5 * 6).map(|_| rng.gaussian()).collect();
    let mut run = || {
        let mut g = Graph::new();
        let enc = g.constant(&[1, 5, 6], enc_vals.clone());
        let io = bn
            .forward(&mut g, &params, enc, Mode::Eval, 1.0, None)
            .unwrap();
        (io.z_d.clone(), g.values(io.z_q).to_vec())
    };
    let (z1, q1) = run();
    let (z2, q2) = run();
    assert_eq!(z1, z2);
    assert_eq!(q1, q2);
    assert!(z1.iter().all(|&c| c < 8));
}

#[test]
fn encoder_receives_gradient_through_every_trainable_kind() {
    for (kind, n_d) in [
        (BottleneckKind::DvqSliced, 2),
        (BottleneckKind::DvqProjected, 2),
        (BottleneckKind::SemHash, 4),
        (BottleneckKind::GumbelSoftmax, 1),
    ] {
        let (bn, params) = new_bottleneck(kind, 8, 4, n_d, 0.999);
        let mut rng = CounterRng::new(3, 3);
        let enc_vals: Vec<f64> = (0..2 * 2 * 8).map(|_| rng.gaussian()).collect();
        let mut noise = CounterRng::new(4, 4);
        let mut g = Graph::new();
        let enc = g.constant(&[2, 2, 8], enc_vals);
        let io = bn
            .forward(&mut g, &params, enc, Mode::Train, 0.5, Some(&mut noise))
            .unwrap();
        let mut loss = g.sum(io.z_q);
        if let Some(aux) = io.aux_loss {
            loss = g.add(loss, aux).unwrap();
        }
        let grads = g.backward(loss).unwrap();
        let ge = grads.wrt(enc).expect("encoder must get a gradient");
        assert!(
            ge.iter().any(|&v| v.abs() > 1e-12),
            "{kind:?}: all-zero encoder gradient"
        );
    }
}

#[test]
fn identity_kind_passes_through() {
    let (bn, params) = new_bottleneck(BottleneckKind::Identity, 4, 1, 1, 0.999);
    let mut g = Graph::new();
    let enc = g.constant(&[1, 2, 4], (0..8).map(|i| i as f64).collect());
    let io = bn
        .forward(&mut g, &params, enc, Mode::Train, 1.0, None)
        .unwrap();
    assert_eq!(g.values(io.z_q), g.values(enc));
    assert!(io.aux_loss.is_none());
    assert!(bn.embed_code(&mut g, &params, &[0], 1, 1).is_err());
}
