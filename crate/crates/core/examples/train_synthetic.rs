//! Train the full model on synthetic data and report retrieval accuracy.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [config.txt] [key=value ...]
//! ```

use std::time::Instant;

use xmodal::config::{parse_kv, RunConfig};
use xmodal::train;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut text = String::new();
    for arg in std::env::args().skip(1) {
        if arg.contains('=') {
            text.push_str(&arg);
        } else {
            text.push_str(&std::fs::read_to_string(&arg)?);
        }
        text.push('\n');
    }
    // later assignments win, so fold duplicates before parsing
    let merged: String = parse_kv_last_wins(&text);
    let cfg = RunConfig::from_kv(&merged)?;
    println!("{}", cfg.to_kv());

    let start = Instant::now();
    let out = train::run(&cfg, None)?;
    for log in &out.curve {
        println!("epoch {:>2}  lr {:.4}  loss {:.4}", log.epoch, log.lr_shared, log.mean_loss);
    }
    println!(
        "rank-1 {:.3}  rank-5 {:.3}  mAP {:.3}  ({:.1}s)",
        out.rank1(),
        out.result.rank(5),
        out.result.map,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn parse_kv_last_wins(text: &str) -> String {
    let mut map = std::collections::BTreeMap::new();
    for line in text.lines() {
        if let Ok(kv) = parse_kv(line) {
            map.extend(kv);
        }
    }
    map.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}
