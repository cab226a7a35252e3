//! Draw identity-balanced two-modality batches and check how often each
//! identity is picked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xmodal::data::{sample_batch, Dataset, SynthDatasetSpec};

fn main() -> Result<(), xmodal::Error> {
    let data = Dataset::generate(&SynthDatasetSpec::new(20, 6, [3, 24, 12], 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, k, draws) = (8, 4, 2000);

    let first = sample_batch(&data, n, k, &mut rng)?;
    println!("batch of {} rows: ids {:?}", first.len(), first.ids);

    let mut counts = [0usize; 20];
    for _ in 0..draws {
        let b = sample_batch(&data, n, k, &mut rng)?;
        for id in b.ids.iter().step_by(k).take(n) {
            counts[*id as usize] += 1;
        }
    }
    let p = n as f64 / 20.0;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    println!("expected {:.0} ± {:.1} picks per identity", draws as f64 * p, sigma);
    for (id, c) in counts.iter().enumerate() {
        println!("identity {id:>2}: {c}");
    }
    Ok(())
}
