//! CMC and mAP on a toy distance matrix, then a multi-shot evaluation of an
//! untrained network on synthetic data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmodal::eval::{average_precisions, cmc_curve, evaluate, Direction, EvalOptions, GalleryMode};
use xmodal::network::{Ablation, Mtmfe, MtmfeConfig};
use xmodal::data::{Dataset, SynthDatasetSpec};
use xmodal::Tensor;

fn main() -> Result<(), xmodal::Error> {
    // one query, its two matches at ranks 1 and 3
    let dist = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4])?;
    let gallery = [7, 1, 7, 2];
    println!("CMC {:?}", cmc_curve(&dist, &[7], &gallery)?);
    println!("AP  {:.6}", average_precisions(&dist, &[7], &gallery)?[0]);

    let model = MtmfeConfig {
        image_shape: [3, 24, 12],
        specific_channels: [8, 8, 16],
        specific_strides: [1, 2, 1],
        num_parts: 3,
        shared_channels: [16, 16],
        level2_stride: 1,
        relation_channels: 8,
        embed_dim: 16,
        ..MtmfeConfig::default()
    };
    let data = Dataset::generate(&SynthDatasetSpec::new(model.num_identities, 6, model.image_shape, 1))?;
    let net = Mtmfe::new(model, Ablation::default())?;
    let store = net.init_params(&mut ChaCha8Rng::seed_from_u64(0));
    for direction in [Direction::Ir2Rgb, Direction::Rgb2Ir] {
        let opts = EvalOptions {
            mode: GalleryMode::MultiShot,
            shots: 3,
            redraws: 5,
            direction,
            seed: 0,
        };
        let r = evaluate(&net, &store, &data, &opts, None)?;
        println!("untrained {direction:?}: rank-1 {:.3}  rank-5 {:.3}  mAP {:.3}", r.rank(1), r.rank(5), r.map);
    }
    Ok(())
}
