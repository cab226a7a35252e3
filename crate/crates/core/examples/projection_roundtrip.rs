//! Lift a 2D feature map into grouped 3D volumes and back, and show where
//! each channel lands.

use xmodal::network::{channel_slot, pt2d, pt3d};
use xmodal::Tensor;

fn main() -> Result<(), xmodal::Error> {
    let (c, h, w, depth) = (6, 2, 3, 3);
    let x = Tensor::new(vec![c, h, w], (0..c * h * w).map(|v| v as f64).collect())?;
    let volume = pt3d(&x, depth)?;
    println!("{:?} -> {:?}", x.shape(), volume.shape());
    for ch in 0..c {
        let (g, d) = channel_slot(ch, depth);
        println!("channel {ch} -> group {g}, depth {d}");
    }
    let back = pt2d(&volume)?;
    let same = back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("flattened back to {:?}; bitwise equal: {same}", back.shape());
    Ok(())
}
