//! Batch-hard mining and the three metric losses on a hand-made batch.

use xmodal::autograd::Tape;
use xmodal::losses::{bdtr_loss, cq_loss, mine, smt_loss};
use xmodal::{Modality, Tensor};

fn main() -> Result<(), xmodal::Error> {
    use Modality::{Ir, Rgb};
    // two identities, two images per modality, 2-d embeddings;
    // the IR rows sit slightly off their RGB counterparts
    #[rustfmt::skip]
    let x = Tensor::new(vec![8, 2], vec![
        0.0, 0.0,   0.2, 0.1,   1.0, 1.0,   0.9, 1.2,
        0.4, 0.3,   0.6, 0.2,   1.3, 0.8,   0.7, 0.9,
    ])?;
    let ids = [0, 0, 1, 1, 0, 0, 1, 1];
    let mods = [Rgb, Rgb, Rgb, Rgb, Ir, Ir, Ir, Ir];

    let mined = mine(&x, &ids, &mods)?;
    for (a, m) in mined.anchors.iter().enumerate() {
        println!(
            "anchor {a} ({} id {}): cross+ {:?} cross- {:?} intra+ {:?} intra- {:?}",
            mods[a], ids[a], m.cross_pos, m.cross_neg, m.intra_pos, m.intra_neg
        );
    }

    let mut tape = Tape::new();
    let v = tape.input(x);
    let margin = 0.3;
    let cq = cq_loss(&mut tape, v, &ids, &mods, margin, false)?;
    let bdtr = bdtr_loss(&mut tape, v, &ids, &mods, margin, false)?;
    let st = smt_loss(&mut tape, v, &ids, &mods, margin, false)?;
    let (cq, bdtr, st) = (tape.value(cq).item(), tape.value(bdtr).item(), tape.value(st).item());
    println!("quadruplet {cq:.4}  top-ranking {bdtr:.4}  single-modality {st:.4}");
    println!("quadruplet - top-ranking = {:.4} (never negative)", cq - bdtr);
    Ok(())
}
