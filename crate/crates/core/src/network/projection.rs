//! Lifting 2D feature maps into a grouped 3D volume and flattening them back.
//!
//! Grouping is contiguous: channel `c` of a `C x H x W` map lands at group
//! `c / D`, depth `c % D`. Under row-major layout both directions are pure
//! reinterpretations of the same buffer.

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn lifted_shape(shape: &[usize], depth: usize) -> Result<Vec<usize>> {
    let (lead, c, h, w) = match shape {
        [c, h, w] => (None, *c, *h, *w),
        [n, c, h, w] => (Some(*n), *c, *h, *w),
        s => return shape_err("pt3d", format!("expected [C,H,W] or [N,C,H,W], got {:?}", s)),
    };
    if depth == 0 || c % depth != 0 {
        return Err(Error::Config(format!(
            "pt3d: {c} channels not divisible by depth {depth}"
        )));
    }
    let mut out: Vec<usize> = lead.into_iter().collect();
    out.extend([c / depth, depth, h, w]);
    Ok(out)
}

fn flattened_shape(shape: &[usize]) -> Result<Vec<usize>> {
    match shape {
        [g, d, h, w] => Ok(vec![g * d, *h, *w]),
        [n, g, d, h, w] => Ok(vec![*n, g * d, *h, *w]),
        s => shape_err("pt2d", format!("expected [G,D,H,W] or [N,G,D,H,W], got {:?}", s)),
    }
}

/// `[C, H, W] -> [C/D, D, H, W]` (a leading batch axis is carried through).
pub fn pt3d(x: &Tensor, depth: usize) -> Result<Tensor> {
    let shape = lifted_shape(x.shape(), depth)?;
    x.clone().reshape(&shape)
}

/// `[G, D, H, W] -> [G*D, H, W]` (a leading batch axis is carried through).
pub fn pt2d(y: &Tensor) -> Result<Tensor> {
    let shape = flattened_shape(y.shape())?;
    y.clone().reshape(&shape)
}

/// Differentiable [`pt3d`].
pub fn pt3d_var(tape: &mut Tape, x: Var, depth: usize) -> Result<Var> {
    let shape = lifted_shape(tape.shape(x), depth)?;
    tape.reshape(x, &shape)
}

/// Differentiable [`pt2d`].
pub fn pt2d_var(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = flattened_shape(tape.shape(y))?;
    tape.reshape(y, &shape)
}

/// Position of 2D channel `c` inside the lifted volume, as `(group, depth)`.
pub fn channel_slot(c: usize, depth: usize) -> (usize, usize) {
    (c / depth, c % depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lift_shape_and_channel_placement() {
        let x = Tensor::new(vec![8, 2, 3], (0..48).map(f64::from).collect()).unwrap();
        let y = pt3d(&x, 4).unwrap();
        assert_eq!(y.shape(), &[2, 4, 2, 3]);
        assert_eq!(channel_slot(5, 4), (1, 1));
        // channel 5's plane sits at group 1, depth 1
        let plane = 6;
        let at = (4 + 1) * plane;
        assert_eq!(&y.data()[at..at + plane], &x.data()[5 * plane..6 * plane]);
    }

    #[test]
    fn single_group_when_depth_equals_channels() {
        let x = Tensor::zeros(&[6, 2, 2]);
        assert_eq!(pt3d(&x, 6).unwrap().shape(), &[1, 6, 2, 2]);
    }

    #[test]
    fn flatten_single_group() {
        let y = Tensor::zeros(&[1, 5, 3, 2]);
        assert_eq!(pt2d(&y).unwrap().shape(), &[5, 3, 2]);
    }

    #[test]
    fn indivisible_channels_is_config_error() {
        let x = Tensor::zeros(&[6, 2, 2]);
        assert!(matches!(pt3d(&x, 4), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_are_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 12, 3, 5], &mut rng);
        assert_eq!(pt2d(&pt3d(&x, 3).unwrap()).unwrap(), x);
        let y = Tensor::randn(&[4, 2, 3, 5], &mut rng);
        assert_eq!(pt3d(&pt2d(&y).unwrap(), 2).unwrap(), y);
    }

    #[test]
    fn gradient_through_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[8, 2, 2], &mut rng);
        let w = Tensor::randn(&[8, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = pt3d_var(&mut tape, xv, 4).unwrap();
        let z = pt2d_var(&mut tape, y).unwrap();
        let loss = tape.weighted_sum(z, w.clone()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &w);
    }
}
