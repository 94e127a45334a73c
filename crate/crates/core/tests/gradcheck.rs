//! Central finite-difference checks for every differentiable operation.
//! h = 1e-5, float64, max relative error 1e-4 on small random shapes.

use latseq::rng::CounterRng;
use latseq::tensor::check::{finite_difference, max_rel_error};
use latseq::tensor::{attention, conv1d, Graph, Padding, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Check d(loss)/d(inputs[arg]) for `build`, which must produce a scalar.
fn check(
    name: &str,
    shapes: &[&[usize]],
    arg: usize,
    sample: impl Fn(&mut CounterRng, usize) -> Vec<f64>,
    build: impl Fn(&mut Graph, &[Tensor]) -> Tensor,
) {
    let mut rng = CounterRng::new(0x5eed, 17);
    let inputs: Vec<Vec<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| sample(&mut rng, s.iter().product::<usize>() + i * 0))
        .collect();

    let run = |vals: &[Vec<f64>]| -> (Graph, Vec<Tensor>, Tensor) {
        let mut g = Graph::new();
        let ts: Vec<Tensor> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| g.constant(s, v.clone()))
            .collect();
        let loss = build(&mut g, &ts);
        (g, ts, loss)
    };

    let (g, ts, loss) = run(&inputs);
    let grads = g.backward(loss).expect("backward");
    let analytic = grads
        .wrt(ts[arg])
        .unwrap_or_else(|| panic!("{name}: no gradient for input {arg}"))
        .to_vec();

    let mut f = |x: &[f64]| -> f64 {
        let mut vals = inputs.clone();
        vals[arg] = x.to_vec();
        let (g, _, loss) = run(&vals);
        g.values(loss)[0]
    };
    let numeric = finite_difference(&mut f, &inputs[arg], H);
    let err = max_rel_error(&analytic, &numeric);
    assert!(err <= TOL, "{name} (arg {arg}): max rel error {err:.3e}");
}

fn uniform(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-1.5, 1.5)).collect()
}

/// Samples that stay away from the relu kink at zero.
fn away_from_zero(rng: &mut CounterRng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.uniform_range(0.1, 1.4);
            if rng.uniform() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect()
}

#[test]
fn grad_matmul() {
    for arg in 0..2 {
        check("matmul", &[&[3, 4], &[4, 2]], arg, uniform, |g, t| {
            let m = g.matmul(t[0], t[1]).unwrap();
            let sq = g.mul(m, m).unwrap();
            g.sum(sq)
        });
    }
}

#[test]
fn grad_bmm_and_transpose() {
    for arg in 0..2 {
        check("bmm", &[&[2, 3, 4], &[2, 4, 2]], arg, uniform, |g, t| {
            let bt = g.transpose_last(t[1]).unwrap();
            let b = g.transpose_last(bt).unwrap();
            let m = g.bmm(t[0], b).unwrap();
            let sq = g.mul(m, m).unwrap();
            g.sum(sq)
        });
    }
}

#[test]
fn grad_elementwise_family() {
    for arg in 0..2 {
        check("add_sub_mul", &[&[2, 5], &[2, 5]], arg, uniform, |g, t| {
            let a = g.add(t[0], t[1]).unwrap();
            let s = g.sub(a, t[1]).unwrap();
            let m = g.mul(s, t[0]).unwrap();
            let aff = g.affine(m, 0.7, -0.2);
            g.sum(aff)
        });
    }
}

#[test]
fn grad_add_broadcast() {
    for arg in 0..2 {
        check("add_broadcast", &[&[2, 3, 4], &[3, 4]], arg, uniform, |g, t| {
            let a = g.add_broadcast(t[0], t[1]).unwrap();
            let sq = g.mul(a, a).unwrap();
            g.sum(sq)
        });
    }
}

#[test]
fn grad_head_split_merge_round_trip() {
    check("split_merge", &[&[2, 3, 6]], 0, uniform, |g, t| {
        let s = g.split_heads(t[0], 2).unwrap();
        let sq = g.mul(s, s).unwrap();
        let m = g.merge_heads(sq, 2).unwrap();
        g.sum(m)
    });
}

#[test]
fn grad_row_rearrangements() {
    check("shift_rows", &[&[2, 4, 3]], 0, uniform, |g, t| {
        let a = g.shift_rows(t[0], -1).unwrap();
        let b = g.shift_rows(t[0], 2).unwrap();
        let s = g.add(a, b).unwrap();
        let sq = g.mul(s, s).unwrap();
        g.sum(sq)
    });
    check("downsample_rows", &[&[2, 4, 3]], 0, uniform, |g, t| {
        let a = g.downsample_rows(t[0], 2, 0).unwrap();
        let b = g.downsample_rows(t[0], 2, 1).unwrap();
        let s = g.add(a, b).unwrap();
        let sq = g.mul(s, s).unwrap();
        g.sum(sq)
    });
    check("slice_rows", &[&[5, 3]], 0, uniform, |g, t| {
        let a = g.slice_rows(t[0], 1, 3).unwrap();
        let sq = g.mul(a, a).unwrap();
        g.sum(sq)
    });
    check("weighted_sum_rows", &[&[2, 3, 4]], 0, uniform, |g, t| {
        let w = [0.2, 0.5, 0.3, 1.0, -0.5, 0.1];
        let a = g.weighted_sum_rows(t[0], &w).unwrap();
        let sq = g.mul(a, a).unwrap();
        g.sum(sq)
    });
}

#[test]
fn grad_relu_and_sat_sigmoid() {
    check("relu", &[&[3, 4]], 0, away_from_zero, |g, t| {
        let r = g.relu(t[0]);
        let sq = g.mul(r, r).unwrap();
        g.sum(sq)
    });
    check("sat_sigmoid", &[&[3, 4]], 0, uniform, |g, t| {
        let r = g.sat_sigmoid(t[0]);
        let sq = g.mul(r, r).unwrap();
        g.sum(sq)
    });
}

#[test]
fn grad_softmax_layer_norm() {
    check("softmax", &[&[3, 5]], 0, uniform, |g, t| {
        let s = g.softmax(t[0]);
        let sq = g.mul(s, s).unwrap();
        g.sum(sq)
    });
    for arg in 0..3 {
        check(
            "layer_norm",
            &[&[4, 6], &[6], &[6]],
            arg,
            uniform,
            |g, t| {
                let ln = g.layer_norm(t[0], t[1], t[2], 1e-6).unwrap();
                let sq = g.mul(ln, ln).unwrap();
                g.sum(sq)
            },
        );
    }
}

#[test]
fn grad_sqrt_sum_last() {
    check("sqrt_sum_last", &[&[3, 4]], 0, uniform, |g, t| {
        let sq = g.mul(t[0], t[0]).unwrap();
        let sums = g.sum_last(sq);
        let aff = g.affine(sums, 1.0, 0.5);
        let root = g.sqrt(aff);
        g.sum(root)
    });
}

#[test]
fn grad_cross_entropy() {
    check("cross_entropy", &[&[4, 5]], 0, uniform, |g, t| {
        g.cross_entropy(t[0], &[1, 0, 4, 2], u32::MAX).unwrap()
    });
    // with a padded row excluded
    check("cross_entropy_pad", &[&[4, 5]], 0, uniform, |g, t| {
        g.cross_entropy(t[0], &[1, 99, 4, 2], 99).unwrap()
    });
}

#[test]
fn grad_gather() {
    check("gather", &[&[6, 3]], 0, uniform, |g, t| {
        let rows = g.gather(t[0], &[0, 2, 2, 5]).unwrap();
        let sq = g.mul(rows, rows).unwrap();
        g.sum(sq)
    });
}

#[test]
fn grad_attention_composite() {
    for arg in 0..3 {
        check(
            "attention",
            &[&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]],
            arg,
            uniform,
            |g, t| {
                let out = attention(g, t[0], t[1], t[2], 2, false, None).unwrap();
                let sq = g.mul(out, out).unwrap();
                g.sum(sq)
            },
        );
    }
    // causal self-attention
    for arg in 0..2 {
        check(
            "attention_causal",
            &[&[1, 4, 4], &[1, 4, 4]],
            arg,
            uniform,
            |g, t| {
                let out = attention(g, t[0], t[0], t[1], 2, true, None).unwrap();
                let sq = g.mul(out, out).unwrap();
                g.sum(sq)
            },
        );
    }
}

#[test]
fn grad_conv1d_both_modes() {
    for arg in 0..2 {
        check(
            "conv1d_same",
            &[&[2, 5, 3], &[9, 4]],
            arg,
            uniform,
            |g, t| {
                let out = conv1d(g, t[0], t[1], 3, 1, Padding::Same).unwrap();
                let sq = g.mul(out, out).unwrap();
                g.sum(sq)
            },
        );
        check(
            "conv1d_strided",
            &[&[2, 6, 3], &[6, 4]],
            arg,
            uniform,
            |g, t| {
                let out = conv1d(g, t[0], t[1], 2, 2, Padding::Valid).unwrap();
                let sq = g.mul(out, out).unwrap();
                g.sum(sq)
            },
        );
    }
}

#[test]
fn grad_composite_conv_relu_matmul_chain() {
    // the composite example: conv -> relu -> matmul against finite differences
    for arg in 0..3 {
        check(
            "conv_relu_matmul",
            &[&[1, 6, 3], &[6, 3], &[3, 2]],
            arg,
            away_from_zero,
            |g, t| {
                let c = conv1d(g, t[0], t[1], 2, 2, Padding::Valid).unwrap();
                let r = g.relu(c);
                let flat = g.reshape(r, &[3, 3]).unwrap();
                let m = g.matmul(flat, t[2]).unwrap();
                let sq = g.mul(m, m).unwrap();
                g.sum(sq)
            },
        );
    }
}

#[test]
fn stop_gradient_holds_in_composite_graphs() {
    // value identity and zero gradient through an arbitrary composition
    let mut rng = CounterRng::new(42, 0);
    let vals = uniform(&mut rng, 12);
    let mut g = Graph::new();
    let x = g.constant(&[3, 4], vals.clone());
    let s = g.stop_gradient(x);
    assert_eq!(g.values(s), vals.as_slice());

    let r = g.relu(s);
    let sm = g.softmax(r);
    let loss = g.sum(sm);
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(x).is_none());

    // mixed: y = x + sg(relu(x)); gradient w.r.t. x is exactly ones
    let mut g = Graph::new();
    let x = g.constant(&[3, 4], vals.clone());
    let r = g.relu(x);
    let sg = g.stop_gradient(r);
    let y = g.add(x, sg).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), vec![1.0; 12].as_slice());
}
