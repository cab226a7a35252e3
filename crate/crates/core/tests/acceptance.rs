//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{
    ap_oracle, cmc_oracle, loss_batch, map_oracle, metric_losses, mining_oracle, retrieval_instance, rng, swapped,
};
use rand::Rng;
use xmodal::config::RunConfig;
use xmodal::data::{sample_batch, Dataset, SynthDatasetSpec};
use xmodal::eval::{average_precisions, cmc_curve, evaluate, mean_ap};
use xmodal::losses::mine;
use xmodal::network::{checkpoint, pt2d, pt3d};
use xmodal::train::{self, ablation_variants, median, run_ablation, AblationRow};
use xmodal::{diagnostics, Tensor};

const SYNTHETIC: &str = include_str!("../../../configs/synthetic.txt");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Verdict {
    let report = diagnostics::run(0, 20, 6).map_err(|e| e.to_string())?;
    let secs = report.elapsed.as_secs_f64();
    check(
        report.op_max() <= 1e-4 && report.network_max() <= 1e-3 && secs < 60.0,
        format!(
            "{} ops, max rel err {:.2e}; network {:.2e}; {secs:.1}s",
            report.ops.len(),
            report.op_max(),
            report.network_max()
        ),
    )
}

fn projections() -> Verdict {
    let mut r = rng(2);
    for case in 0..100 {
        let (n, g, d, h, w) = (r.gen_range(1..4), r.gen_range(1..8), r.gen_range(1..6), r.gen_range(1..9), r.gen_range(1..9));
        let x = Tensor::randn(&[n, g * d, h, w], &mut r);
        let y = Tensor::randn(&[n, g, d, h, w], &mut r);
        let bits = |a: &Tensor, b: &Tensor| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
        let xx = pt2d(&pt3d(&x, d).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let yy = pt3d(&pt2d(&y).map_err(|e| e.to_string())?, d).map_err(|e| e.to_string())?;
        if !bits(&x, &xx) || !bits(&y, &yy) {
            return Err(format!("shape #{case} [{n},{},{h},{w}] with depth {d} not restored", g * d));
        }
    }
    Ok("100 random shapes, both compositions bitwise".into())
}

fn metrics() -> Verdict {
    let dist = Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let ap = average_precisions(&dist, &[7], &[7, 1, 7, 2]).map_err(|e| e.to_string())?[0];
    if (ap - 5.0 / 6.0).abs() > 1e-9 {
        return Err(format!("two-relevant AP {ap}"));
    }
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (d, q, g) = retrieval_instance(&mut r, 20, 30);
        let cmc = cmc_curve(&d, &q, &g).map_err(|e| e.to_string())?;
        for (a, b) in cmc.iter().zip(cmc_oracle(&d, &q, &g)) {
            worst = worst.max((a - b).abs());
        }
        let aps = average_precisions(&d, &q, &g).map_err(|e| e.to_string())?;
        for (i, a) in aps.iter().enumerate() {
            worst = worst.max((a - ap_oracle(d.row(i), q[i], &g)).abs());
        }
        worst = worst.max((mean_ap(&d, &q, &g).map_err(|e| e.to_string())? - map_oracle(&d, &q, &g)).abs());
    }
    check(worst <= 1e-9, format!("AP(ranks 1,3) = {ap:.6}; 200 instances, max |Δ| {worst:.1e}"))
}

fn loss_algebra() -> Verdict {
    let mut r = rng(4);
    let (mut swap_worst, mut mined) = (0.0f64, 0);
    for i in 0..1000 {
        let b = loss_batch(&mut r, 4, 3);
        let margin = [0.0, 0.1, 0.3, 1.0][i % 4];
        let normalize = i % 2 == 0;
        let (cq, bd, st) = metric_losses(&b, &b.modalities, margin, normalize);
        if cq < 0.0 || bd < 0.0 || st < 0.0 {
            return Err(format!("batch {i}: negative loss ({cq}, {bd}, {st})"));
        }
        if cq < bd {
            return Err(format!("batch {i}: quadruplet {cq} < top-ranking {bd}"));
        }
        let (cq2, bd2, st2) = metric_losses(&b, &swapped(&b.modalities), margin, normalize);
        swap_worst = swap_worst.max((cq - cq2).abs()).max((bd - bd2).abs()).max((st - st2).abs());
        let got = mine(&b.x, &b.ids, &b.modalities).map_err(|e| e.to_string())?;
        if got.anchors != mining_oracle(&b.x, &b.ids, &b.modalities) {
            return Err(format!("batch {i}: mining differs from exhaustive search"));
        }
        mined += 1;
    }
    check(
        swap_worst <= 1e-12,
        format!("1000 batches: losses >= 0, cq >= bdtr, swap |Δ| {swap_worst:.1e}, {mined} minings exact"),
    )
}

fn sampler() -> Verdict {
    let data = Dataset::generate(&SynthDatasetSpec::new(20, 6, [1, 4, 2], 5)).map_err(|e| e.to_string())?;
    let mut r = rng(5);
    let trials = 10_000;
    let mut counts = [0usize; 20];
    for t in 0..trials {
        let b = sample_batch(&data, 8, 4, &mut r).map_err(|e| e.to_string())?;
        let mut per = std::collections::HashMap::new();
        for (&id, &m) in b.ids.iter().zip(&b.modalities) {
            *per.entry((id, m)).or_insert(0) += 1;
        }
        if b.len() != 64 || per.len() != 16 || per.values().any(|&c| c != 4) {
            return Err(format!("batch {t} has {} rows over {} (identity, modality) cells", b.len(), per.len()));
        }
        for id in b.ids.iter().step_by(4).take(8) {
            counts[*id as usize] += 1;
        }
    }
    let p = 0.4;
    let (mean, sigma) = (trials as f64 * p, (trials as f64 * p * (1.0 - p)).sqrt());
    let worst = counts.iter().map(|&c| (c as f64 - mean).abs() / sigma).fold(0.0, f64::max);
    check(worst <= 3.0, format!("10^4 batches of 64 = 8 ids x 4 x 2 modalities; worst identity {worst:.2} sigma"))
}

struct Ablation {
    rows: Vec<AblationRow>,
    slowest_full: Duration,
}

fn ablation(cfg: &RunConfig) -> Result<Ablation, String> {
    let wanted = ["+ML+P", "+RF", "+RF+CQ"];
    let variants: Vec<_> = ablation_variants().into_iter().filter(|v| wanted.contains(&v.name)).collect();
    let mut slowest_full = Duration::ZERO;
    let mut last = Instant::now();
    let rows = run_ablation(cfg, &variants, &SEEDS, |name, seed, out| {
        let took = last.elapsed();
        last = Instant::now();
        if name == "+RF+CQ" {
            slowest_full = slowest_full.max(took);
        }
        eprintln!("    {name:<7} seed {seed}: rank-1 {:.4}  mAP {:.4}  {:.1}s", out.rank1(), out.result.map, took.as_secs_f64());
    })
    .map_err(|e| e.to_string())?;
    Ok(Ablation { rows, slowest_full })
}

fn row<'a>(a: &'a Ablation, name: &str) -> &'a AblationRow {
    a.rows.iter().find(|r| r.name == name).expect("variant was run")
}

fn end_to_end(cfg: &RunConfig, a: &Ablation) -> Verdict {
    let full = row(a, "+RF+CQ");
    let secs = a.slowest_full.as_secs_f64();
    check(
        full.median_rank1 >= 0.90 && secs < 300.0 && cfg.epochs <= 15,
        format!(
            "full model IR->RGB single-shot rank-1 median {:.4} over {:?} ({} epochs, slowest run {secs:.1}s)",
            median(&full.rank1),
            full.rank1.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            cfg.epochs
        ),
    )
}

fn ablation_order(a: &Ablation) -> Verdict {
    let (app, rf, full) = (row(a, "+ML+P").median_rank1, row(a, "+RF").median_rank1, row(a, "+RF+CQ").median_rank1);
    check(
        full >= rf && rf >= app && full - app >= 0.03,
        format!("median rank-1 ML+P {app:.4} -> +RF {rf:.4} -> +RF+CQ {full:.4} (gain {:.4})", full - app),
    )
}

fn determinism(base: &RunConfig) -> Verdict {
    let mut cfg = base.clone();
    cfg.epochs = 2;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = train::run(&cfg, Some(dir.path())).map_err(|e| e.to_string())?;
    let b = train::run(&cfg, None).map_err(|e| e.to_string())?;
    let bits = |o: &train::RunOutcome| -> Vec<u64> { o.curve.iter().flat_map(|e| e.losses.iter().map(|l| l.to_bits())).collect() };
    if bits(&a) != bits(&b) {
        return Err("curves differ between identical runs".into());
    }
    let (_, test) = train::datasets(&cfg).map_err(|e| e.to_string())?;
    let mut store = a.net.init_params(&mut rng(77));
    checkpoint::load_into(&mut store, &train::checkpoint_path(dir.path(), cfg.epochs)).map_err(|e| e.to_string())?;
    let again = evaluate(&a.net, &store, &test, &cfg.eval, None).map_err(|e| e.to_string())?;
    let (j1, j2) = (a.result.to_json().map_err(|e| e.to_string())?, again.to_json().map_err(|e| e.to_string())?);
    check(j1 == j2, format!("{} losses bitwise equal; reloaded checkpoint evaluation JSON identical", bits(&a).len()))
}

fn main() -> ExitCode {
    let cfg = RunConfig::from_kv(SYNTHETIC).expect("shipped config parses");
    let mut failed = 0;
    let mut report = |n: usize, title: &str, v: Verdict| {
        match &v {
            Ok(d) => println!("PASS {n}. {title}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n}. {title}: {d}")
            }
        }
    };
    report(1, "gradient audit", gradients());
    report(2, "projection identities", projections());
    report(3, "retrieval metrics vs oracles", metrics());
    report(4, "loss algebra", loss_algebra());
    report(5, "batch sampler", sampler());
    match ablation(&cfg) {
        Ok(a) => {
            report(6, "synthetic end-to-end", end_to_end(&cfg, &a));
            report(7, "ablation direction", ablation_order(&a));
        }
        Err(e) => {
            report(6, "synthetic end-to-end", Err(e.clone()));
            report(7, "ablation direction", Err(e));
        }
    }
    report(8, "determinism and persistence", determinism(&cfg));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
