//! Central finite-difference checks for every differentiable primitive.
//! Each op is probed on 10 random small instances; analytic gradients
//! must match the two-sided difference quotient within 1e-3 relative.
//! The oracle evaluates forwards with 64-bit accumulation so the
//! quotient is not drowned in f32 rounding.

use voxrag_core::gradcheck::max_rel_error;
use voxrag_core::tensor::{Tape, Tensor, ValueId};
use voxrag_core::Result;

const H: f32 = 2e-3;
const TOL: f64 = 1e-3;
const INSTANCES: u64 = 10;

/// Random fixed "readout" so the loss is a non-uniform weighting of the
/// op output: loss = mean(out * R).
fn weighted_mean(tape: &mut Tape, out: ValueId, seed: u64) -> Result<ValueId> {
    let shape = tape.value(out).shape().to_vec();
    let r = tape.leaf(Tensor::randn(&shape, 0xABCD ^ seed), false);
    let prod = tape.mul(out, r)?;
    Ok(tape.mean(prod))
}

fn assert_grad(
    name: &str,
    build: &dyn Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
    inputs: &[Tensor],
    wrt: usize,
) {
    let err = max_rel_error(build, inputs, wrt, H).unwrap();
    assert!(err < TOL, "{name} wrt input {wrt}: rel error {err}");
}

#[test]
fn conv3d_gradients() {
    for s in 0..INSTANCES {
        let (n, c, k) = (1 + (s % 2) as usize, 1 + (s % 3) as usize, 1 + (s % 2) as usize * 2);
        let (stride, pad) = if s % 2 == 0 { (1, 1) } else { (2, 0) };
        let kk = if s % 3 == 0 { 1 } else { 3 };
        let x = Tensor::randn(&[n, c, 4, 4, 4], 100 + s);
        let w = Tensor::randn(&[k, c, kk, kk, kk], 200 + s);
        let b = Tensor::randn(&[k], 300 + s);
        let build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.conv3d(ids[0], ids[1], ids[2], stride, pad)?;
            weighted_mean(t, y, s)
        };
        for wrt in 0..3 {
            assert_grad("conv3d", &build, &[x.clone(), w.clone(), b.clone()], wrt);
        }
    }
}

#[test]
fn conv_transpose3d_gradients() {
    for s in 0..INSTANCES {
        let (c_in, c_out) = (1 + (s % 2) as usize, 1 + (s % 3) as usize);
        let (kk, stride, pad) = if s % 2 == 0 { (2, 2, 0) } else { (3, 1, 1) };
        let x = Tensor::randn(&[1, c_in, 3, 3, 3], 400 + s);
        let w = Tensor::randn(&[c_in, c_out, kk, kk, kk], 500 + s);
        let b = Tensor::randn(&[c_out], 600 + s);
        let build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.conv_transpose3d(ids[0], ids[1], ids[2], stride, pad)?;
            weighted_mean(t, y, s)
        };
        for wrt in 0..3 {
            assert_grad("conv_transpose3d", &build, &[x.clone(), w.clone(), b.clone()], wrt);
        }
    }
}

#[test]
fn linear_gradients() {
    for s in 0..INSTANCES {
        let (b_rows, i_cols, o_cols) = (2 + (s % 3) as usize, 3 + (s % 4) as usize, 2 + (s % 2) as usize);
        let x = Tensor::randn(&[b_rows, i_cols], 700 + s);
        let w = Tensor::randn(&[o_cols, i_cols], 800 + s);
        let b = Tensor::randn(&[o_cols], 900 + s);
        let build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.linear(ids[0], ids[1], ids[2])?;
            weighted_mean(t, y, s)
        };
        for wrt in 0..3 {
            assert_grad("linear", &build, &[x.clone(), w.clone(), b.clone()], wrt);
        }
    }
}

#[test]
fn group_norm_gradients() {
    for s in 0..INSTANCES {
        let groups = if s % 2 == 0 { 2 } else { 4 };
        let x = Tensor::randn(&[2, 4, 2, 2, 2], 1000 + s);
        let gamma = Tensor::randn(&[4], 1100 + s);
        let beta = Tensor::randn(&[4], 1200 + s);
        let build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.group_norm(ids[0], groups, ids[1], ids[2], 1e-3)?;
            weighted_mean(t, y, s)
        };
        for wrt in 0..3 {
            assert_grad("group_norm", &build, &[x.clone(), gamma.clone(), beta.clone()], wrt);
        }
    }
}

#[test]
fn square_at_three_matches_hand_value() {
    // f(x) = x*x at x = 3: analytic 6.0, h = 1e-3 central difference.
    let x = Tensor::scalar(3.0);
    let build = |t: &mut Tape, ids: &[ValueId]| -> Result<ValueId> {
        let y = t.mul(ids[0], ids[0])?;
        Ok(t.sum(y))
    };
    let fd = voxrag_core::gradcheck::finite_difference_grad(&build, &[x.clone()], 0, 1e-3).unwrap();
    let an = voxrag_core::gradcheck::analytic_grad(&build, &[x], 0).unwrap();
    assert!((an[0] - 6.0).abs() < 1e-5);
    assert!((fd[0] - 6.0).abs() < 1e-3);
}

#[test]
fn unary_elementwise_gradients() {
    for s in 0..INSTANCES {
        let mut x = Tensor::randn(&[3, 4], 1300 + s);
        // keep exp's dynamic range moderate so output quantization does
        // not dominate the quotient
        for v in x.data_mut() {
            *v *= 0.7;
        }
        for (name, f) in [
            ("silu", 0usize),
            ("sigmoid", 1),
            ("exp", 2),
            ("scale", 3),
            ("add_const", 4),
        ] {
            let build = move |t: &mut Tape, ids: &[ValueId]| {
                let y = match f {
                    0 => t.silu(ids[0]),
                    1 => t.sigmoid(ids[0]),
                    2 => t.exp(ids[0]),
                    3 => t.scale(ids[0], -1.7),
                    _ => t.add_const(ids[0], 0.9),
                };
                weighted_mean(t, y, s)
            };
            assert_grad(name, &build, &[x.clone()], 0);
        }
    }
}

#[test]
fn binary_elementwise_gradients() {
    for s in 0..INSTANCES {
        let a = Tensor::randn(&[2, 3, 2, 1, 2], 1400 + s);
        let b = Tensor::randn(&[2, 3, 2, 1, 2], 1500 + s);
        for (name, is_add) in [("add", true), ("mul", false)] {
            let build = move |t: &mut Tape, ids: &[ValueId]| {
                let y = if is_add { t.add(ids[0], ids[1])? } else { t.mul(ids[0], ids[1])? };
                weighted_mean(t, y, s)
            };
            for wrt in 0..2 {
                assert_grad(name, &build, &[a.clone(), b.clone()], wrt);
            }
        }
    }
}

#[test]
fn mul_scalar_gradients() {
    for s in 0..INSTANCES {
        let x = Tensor::randn(&[4, 3], 1600 + s);
        let sc = Tensor::randn(&[1], 1700 + s);
        let build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.mul_scalar(ids[0], ids[1])?;
            weighted_mean(t, y, s)
        };
        for wrt in 0..2 {
            assert_grad("mul_scalar", &build, &[x.clone(), sc.clone()], wrt);
        }
    }
}

#[test]
fn scale_shift_gradients() {
    for s in 0..INSTANCES {
        let x = Tensor::randn(&[2, 3, 2, 2, 2], 1800 + s);
        let sc = Tensor::randn(&[2, 3], 1900 + s);
        let sh = Tensor::randn(&[2, 3], 2000 + s);
        let build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.scale_shift(ids[0], ids[1], ids[2])?;
            weighted_mean(t, y, s)
        };
        for wrt in 0..3 {
            assert_grad("scale_shift", &build, &[x.clone(), sc.clone(), sh.clone()], wrt);
        }
    }
}

#[test]
fn reduction_gradients() {
    for s in 0..INSTANCES {
        let a = Tensor::randn(&[3, 5], 2100 + s);
        let b = Tensor::randn(&[3, 5], 2200 + s);
        let mean_build = |t: &mut Tape, ids: &[ValueId]| -> Result<ValueId> { Ok(t.mean(ids[0])) };
        assert_grad("mean", &mean_build, &[a.clone()], 0);
        let sum_build = |t: &mut Tape, ids: &[ValueId]| -> Result<ValueId> { Ok(t.sum(ids[0])) };
        assert_grad("sum", &sum_build, &[a.clone()], 0);
        let mse_build = |t: &mut Tape, ids: &[ValueId]| t.mse(ids[0], ids[1]);
        for wrt in 0..2 {
            assert_grad("mse", &mse_build, &[a.clone(), b.clone()], wrt);
        }
    }
}

#[test]
fn softmax_cross_entropy_gradients() {
    for s in 0..INSTANCES {
        let b = 3 + (s % 3) as usize;
        let k = 4 + (s % 2) as usize;
        let logits = Tensor::randn(&[b, k], 2300 + s);
        let targets: Vec<usize> = (0..b).map(|i| (i + s as usize) % k).collect();
        let build = move |t: &mut Tape, ids: &[ValueId]| t.softmax_cross_entropy(ids[0], &targets);
        assert_grad("softmax_cross_entropy", &build, &[logits], 0);
    }
}

#[test]
fn shape_op_gradients() {
    for s in 0..INSTANCES {
        let a = Tensor::randn(&[2, 2, 2, 2, 2], 2400 + s);
        let b = Tensor::randn(&[2, 3, 2, 2, 2], 2500 + s);
        let concat_build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.concat(ids[0], ids[1])?;
            weighted_mean(t, y, s)
        };
        for wrt in 0..2 {
            assert_grad("concat", &concat_build, &[a.clone(), b.clone()], wrt);
        }

        let x2 = Tensor::randn(&[3, 6], 2600 + s);
        let slice_build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.slice_cols(ids[0], 1, 4)?;
            weighted_mean(t, y, s)
        };
        assert_grad("slice_cols", &slice_build, &[x2], 0);

        let up_build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.upsample_nearest2(ids[0])?;
            weighted_mean(t, y, s)
        };
        assert_grad("upsample_nearest2", &up_build, &[a.clone()], 0);

        let down_build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.downsample_nearest2(ids[0])?;
            weighted_mean(t, y, s)
        };
        assert_grad("downsample_nearest2", &down_build, &[a.clone()], 0);

        let gap_build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.global_avg_pool(ids[0])?;
            weighted_mean(t, y, s)
        };
        assert_grad("global_avg_pool", &gap_build, &[b.clone()], 0);
    }
}

#[test]
fn l2_normalize_rows_gradients() {
    for s in 0..INSTANCES {
        // keep rows away from zero norm so the quotient is well-posed
        let mut x = Tensor::randn(&[3, 4], 2700 + s);
        for v in x.data_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        let build = move |t: &mut Tape, ids: &[ValueId]| {
            let y = t.l2_normalize_rows(ids[0])?;
            weighted_mean(t, y, s)
        };
        assert_grad("l2_normalize_rows", &build, &[x], 0);
    }
}

#[test]
fn composed_network_gradient() {
    // conv -> group_norm -> scale_shift -> silu -> gap -> linear -> mse
    for s in 0..3 {
        let x = Tensor::randn(&[2, 2, 4, 4, 4], 2800 + s);
        let w = Tensor::randn(&[4, 2, 3, 3, 3], 2900 + s);
        let b = Tensor::randn(&[4], 3000 + s);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let sc = Tensor::randn(&[2, 4], 3100 + s);
        let sh = Tensor::randn(&[2, 4], 3200 + s);
        let lw = Tensor::randn(&[3, 4], 3300 + s);
        let lb = Tensor::randn(&[3], 3400 + s);
        let target = Tensor::randn(&[2, 3], 3500 + s);
        let inputs = vec![x, w, b, gamma, beta, sc, sh, lw, lb, target];
        let build = |t: &mut Tape, ids: &[ValueId]| {
            let c = t.conv3d(ids[0], ids[1], ids[2], 1, 1)?;
            let g = t.group_norm(c, 2, ids[3], ids[4], 1e-3)?;
            let m = t.scale_shift(g, ids[5], ids[6])?;
            let a = t.silu(m);
            let p = t.global_avg_pool(a)?;
            let o = t.linear(p, ids[7], ids[8])?;
            t.mse(o, ids[9])
        };
        for wrt in [0, 1, 2, 3, 5, 7] {
            assert_grad("composed", &build, &inputs, wrt);
        }
    }
}
