//! Train briefly with per-epoch checkpoints, reload the last one into fresh
//! weights and confirm evaluation is unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmodal::config::RunConfig;
use xmodal::eval::evaluate;
use xmodal::network::checkpoint;
use xmodal::train;

const CONFIG: &str = "
image_shape = 3,24,12
specific_channels = 8,8,16
specific_strides = 1,2,1
num_parts = 3
shared_channels = 16,16
level2_stride = 1
relation_channels = 8
embed_dim = 16
epochs = 3
batches_per_epoch = 4
anchor_reduction = mean
lr_specific = 0.003
lr_shared = 0.03
clip_norm = 5
";

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::from_kv(CONFIG)?;
    let dir = std::env::temp_dir().join("xmodal-checkpoint-demo");
    let out = train::run(&cfg, Some(&dir))?;
    for log in &out.curve {
        println!("epoch {}  loss {:.4}", log.epoch, log.mean_loss);
    }

    let last = train::checkpoint_path(&dir, cfg.epochs);
    let mut store = out.net.init_params(&mut ChaCha8Rng::seed_from_u64(99));
    checkpoint::load_into(&mut store, &last)?;
    let (_, test) = train::datasets(&cfg)?;
    let again = evaluate(&out.net, &store, &test, &cfg.eval, None)?;
    println!("{}", again.to_json()?);
    println!(
        "reloaded {} ({} bytes); evaluation identical: {}",
        last.display(),
        std::fs::metadata(&last)?.len(),
        again.to_json()? == out.result.to_json()?
    );
    Ok(())
}
