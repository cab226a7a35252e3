mod common;

use common::rng;
use proptest::prelude::*;
use xmodal::autograd::Tape;
use xmodal::diagnostics;
use xmodal::Tensor;

#[test]
fn every_op_and_the_micro_network_agree_with_finite_differences() {
    let report = diagnostics::run(3, 10, 4).unwrap();
    assert_eq!(report.ops.len(), diagnostics::OPS.len());
    for op in &report.ops {
        assert!(op.max_rel_err <= 1e-4, "{}: {:.3e}", op.op, op.max_rel_err);
    }
    for (name, err) in &report.network {
        assert!(*err <= 1e-3, "{name}: {err:.3e}");
    }
}

/// Direct seven-loop convolution over `[N, C, D, H, W]`.
fn naive_conv3d(x: &Tensor, w: &Tensor, b: &[f64], stride: [usize; 3], pad: [usize; 3]) -> Tensor {
    let s = x.shape();
    let k = w.shape();
    let (n, c, o) = (s[0], s[1], k[0]);
    let out: Vec<usize> = (0..3).map(|a| (s[2 + a] + 2 * pad[a] - k[2 + a]) / stride[a] + 1).collect();
    let mut y = Tensor::zeros(&[n, o, out[0], out[1], out[2]]);
    let at = |t: &Tensor, idx: [usize; 5]| {
        let sh = t.shape();
        let mut f = 0;
        for a in 0..5 {
            f = f * sh[a] + idx[a];
        }
        t.data()[f]
    };
    let mut i = 0;
    for ni in 0..n {
        for oi in 0..o {
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut acc = b[oi];
                        for ci in 0..c {
                            for kd in 0..k[2] {
                                for kh in 0..k[3] {
                                    for kw in 0..k[4] {
                                        let (d, h, ww) = (
                                            (od * stride[0] + kd) as isize - pad[0] as isize,
                                            (oh * stride[1] + kh) as isize - pad[1] as isize,
                                            (ow * stride[2] + kw) as isize - pad[2] as isize,
                                        );
                                        if d < 0 || h < 0 || ww < 0 || d >= s[2] as isize || h >= s[3] as isize || ww >= s[4] as isize {
                                            continue;
                                        }
                                        acc += at(w, [oi, ci, kd, kh, kw]) * at(x, [ni, ci, d as usize, h as usize, ww as usize]);
                                    }
                                }
                            }
                        }
                        y.data_mut()[i] = acc;
                        i += 1;
                    }
                }
            }
        }
    }
    y
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv3d_matches_direct_loops(
        n in 1usize..3, c in 1usize..3, o in 1usize..4,
        dims in prop::array::uniform3(1usize..6), kernel in prop::array::uniform3(1usize..4),
        stride in prop::array::uniform3(1usize..3), pad in prop::array::uniform3(0usize..2),
        seed in any::<u64>(),
    ) {
        prop_assume!((0..3).all(|a| dims[a] + 2 * pad[a] >= kernel[a]));
        let mut r = rng(seed);
        let x = Tensor::randn(&[n, c, dims[0], dims[1], dims[2]], &mut r);
        let w = Tensor::randn(&[o, c, kernel[0], kernel[1], kernel[2]], &mut r);
        let b = Tensor::randn(&[o], &mut r);
        let expect = naive_conv3d(&x, &w, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.input(x), tape.input(w), tape.input(b));
        let y = tape.conv3d(xv, wv, bv, stride, pad).unwrap();
        prop_assert_eq!(tape.shape(y), expect.shape());
        for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
            prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }

    #[test]
    fn conv2d_is_conv3d_with_unit_depth(
        c in 1usize..3, o in 1usize..3, h in 3usize..7, w in 3usize..7, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, c, h, w], &mut r);
        let k = Tensor::randn(&[o, c, 3, 3], &mut r);
        let b = Tensor::randn(&[o], &mut r);
        let expect = naive_conv3d(
            &x.clone().reshape(&[2, c, 1, h, w]).unwrap(),
            &k.clone().reshape(&[o, c, 1, 3, 3]).unwrap(),
            b.data(),
            [1, stride, stride],
            [0, pad, pad],
        );
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.input(x), tape.input(k), tape.input(b));
        let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(expect.data()) {
            prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()));
        }
    }
}
