use proptest::prelude::*;
use xmodal::autograd::Tape;
use xmodal::network::{channel_slot, pt2d, pt2d_var, pt3d, pt3d_var};
use xmodal::Tensor;

fn shape_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, usize)> {
    // (batch, groups, depth, h, w)
    (1usize..4, 1usize..6, 1usize..6, 1usize..7, 1usize..7)
}

fn filled(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as u64).wrapping_mul(2654435761) ^ seed) as f64 * 1e-3 - 0.5).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn lift_then_flatten_is_identity((n, g, d, h, w) in shape_strategy(), seed in any::<u64>()) {
        let x = filled(&[n, g * d, h, w], seed);
        let back = pt2d(&pt3d(&x, d).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), x.shape());
        prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn flatten_then_lift_is_identity((n, g, d, h, w) in shape_strategy(), seed in any::<u64>()) {
        let y = filled(&[n, g, d, h, w], seed);
        let back = pt3d(&pt2d(&y).unwrap(), d).unwrap();
        prop_assert_eq!(back.shape(), y.shape());
        prop_assert!(back.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn channel_lands_in_its_slot((g, d, h, w) in (1usize..5, 1usize..5, 1usize..5, 1usize..5), seed in any::<u64>()) {
        let x = filled(&[g * d, h, w], seed);
        let y = pt3d(&x, d).unwrap();
        for c in 0..g * d {
            let (gi, di) = channel_slot(c, d);
            let plane = h * w;
            prop_assert_eq!(&x.data()[c * plane..][..plane], &y.data()[(gi * d + di) * plane..][..plane]);
        }
    }
}

#[test]
fn lift_rejects_indivisible_channels() {
    assert!(pt3d(&Tensor::zeros(&[5, 2, 2]), 2).is_err());
    assert!(pt3d(&Tensor::zeros(&[4, 2, 2]), 0).is_err());
}

#[test]
fn differentiable_versions_pass_gradients_through() {
    let mut tape = Tape::new();
    let x = tape.input(filled(&[2, 6, 3, 2], 3));
    let y = pt3d_var(&mut tape, x, 3).unwrap();
    assert_eq!(tape.shape(y), &[2, 2, 3, 3, 2]);
    let z = pt2d_var(&mut tape, y).unwrap();
    let s = tape.sum_all(z).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));
}
