//! Train each ablation variant over several seeds and print median
//! retrieval accuracy.
//!
//! ```text
//! cargo run --release --example ablation -- [config.txt] [seeds=5] [only=+ML+P,+RF,+RF+CQ]
//! ```

use xmodal::config::RunConfig;
use xmodal::train::{ablation_table, ablation_variants, run_ablation};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::default();
    let mut seeds = 5u64;
    let mut only: Option<Vec<String>> = None;
    let mut overrides = String::new();
    for arg in std::env::args().skip(1) {
        if let Some(n) = arg.strip_prefix("seeds=") {
            seeds = n.parse()?;
        } else if let Some(list) = arg.strip_prefix("only=") {
            only = Some(list.split(',').map(str::to_string).collect());
        } else if arg.contains('=') {
            overrides.push_str(&arg);
            overrides.push('\n');
        } else {
            cfg = RunConfig::load(arg.as_ref())?;
        }
    }
    for line in overrides.lines() {
        let (k, v) = line.split_once('=').expect("checked above");
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;

    let variants: Vec<_> = ablation_variants()
        .into_iter()
        .filter(|v| only.as_ref().is_none_or(|o| o.iter().any(|n| n == v.name)))
        .collect();
    let seeds: Vec<u64> = (0..seeds).collect();
    let rows = run_ablation(&cfg, &variants, &seeds, |name, seed, out| {
        eprintln!("{name:<9} seed {seed}: rank-1 {:.3} mAP {:.3}", out.rank1(), out.result.map);
    })?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
