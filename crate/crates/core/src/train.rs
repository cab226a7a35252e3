//! Training loop, full runs and the ablation matrix.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sgd_step, ParamStore, SgdConfig, Tape};
use crate::config::RunConfig;
use crate::data::{augment_flip, sample_batch, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, RetrievalResult};
use crate::losses::{total_loss, LossBreakdown, MetricLoss};
use crate::network::{checkpoint, Ablation, Mtmfe, RelationMode};

/// One optimizer step's record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub breakdown: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr_specific: f64,
    pub lr_shared: f64,
    pub mean_loss: f64,
    pub losses: Vec<f64>,
}

/// Independent streams so that, say, toggling flips leaves initialization untouched.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Network plus initial weights, calibrated on one batch of `data`.
pub fn build(cfg: &RunConfig, data: &Dataset) -> Result<(Mtmfe, ParamStore)> {
    let net = Mtmfe::new(cfg.model.clone(), cfg.ablation)?;
    let mut store = net.init_params(&mut stream(cfg.seed, 1));
    let batch = sample_batch(data, cfg.batch_n, cfg.batch_k, &mut stream(cfg.seed, 3))?;
    net.calibrate(&mut store, &batch.rgb, &batch.ir)?;
    Ok((net, store))
}

/// Train `store` in place.
///
/// `on_epoch` runs after every epoch with the updated weights; returning an
/// error stops training. A non-finite loss aborts with the offending batch's
/// breakdown.
pub fn train(
    cfg: &RunConfig,
    net: &Mtmfe,
    store: &mut ParamStore,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, 2);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let sgd = SgdConfig {
            lr_specific: cfg.optim.lr_at(cfg.optim.lr_specific, epoch),
            lr_shared: cfg.optim.lr_at(cfg.optim.lr_shared, epoch),
            momentum: cfg.optim.momentum,
            weight_decay: cfg.optim.weight_decay,
            clip_norm: cfg.optim.clip_norm,
        };
        let mut losses = Vec::with_capacity(cfg.batches_per_epoch);
        for b in 0..cfg.batches_per_epoch {
            let step = train_step(cfg, net, store, data, &sgd, &mut rng)?;
            if !step.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} at epoch {epoch}, batch {b}: {}",
                    step.loss,
                    step.breakdown.to_json().unwrap_or_default()
                )));
            }
            losses.push(step.loss);
        }
        let log = EpochLog {
            epoch,
            lr_specific: sgd.lr_specific,
            lr_shared: sgd.lr_shared,
            mean_loss: losses.iter().sum::<f64>() / losses.len().max(1) as f64,
            losses,
        };
        on_epoch(&log, store)?;
        curve.push(log);
    }
    Ok(curve)
}

/// Sample one batch, take one SGD step.
pub fn train_step<R: Rng>(
    cfg: &RunConfig,
    net: &Mtmfe,
    store: &mut ParamStore,
    data: &Dataset,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<StepLog> {
    let batch = sample_batch(data, cfg.batch_n, cfg.batch_k, rng)?;
    let rgb = augment_flip(&batch.rgb, cfg.flip_prob, rng);
    let ir = augment_flip(&batch.ir, cfg.flip_prob, rng);
    let mut tape = Tape::new();
    let bundle = net.forward(&mut tape, store, &rgb, &ir)?;
    let (loss, breakdown) = total_loss(
        &mut tape,
        &bundle.parts,
        &batch.class_ids(),
        &batch.modalities,
        &cfg.loss,
        cfg.metric,
    )?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Ok(StepLog { epoch: 0, batch: 0, loss: value, breakdown });
    }
    tape.backward(loss)?;
    store.zero_grads();
    store.accumulate_grads(&tape);
    sgd_step(store, sgd)?;
    Ok(StepLog { epoch: 0, batch: 0, loss: value, breakdown })
}

/// Outcome of a generate, train and evaluate run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub curve: Vec<EpochLog>,
    pub result: RetrievalResult,
    pub store: ParamStore,
    pub net: Mtmfe,
}

impl RunOutcome {
    pub fn rank1(&self) -> f64 {
        self.result.rank(1)
    }
}

/// Train/test datasets for `cfg`, split by image within every identity.
pub fn datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Dataset::generate(&cfg.data)?.split(cfg.train_per_identity)
}

/// Generate data, train, then evaluate on the held-out images.
///
/// Writes `config.txt`, `curve.json`, per-epoch checkpoints and
/// `eval.json` when `out` is given.
pub fn run(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    cfg.validate()?;
    let (train_set, test_set) = datasets(cfg)?;
    let (net, mut store) = build(cfg, &train_set)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), cfg.to_kv())?;
        checkpoint::save(&store, &checkpoint_path(dir, 0))?;
    }
    let curve = train(cfg, &net, &mut store, &train_set, |log, store| {
        if let Some(dir) = out {
            checkpoint::save(store, &checkpoint_path(dir, log.epoch + 1))?;
        }
        Ok(())
    })?;
    let result = evaluate(&net, &store, &test_set, &cfg.eval, None)?;
    if let Some(dir) = out {
        std::fs::write(dir.join("curve.json"), serde_json::to_string_pretty(&curve)?)?;
        std::fs::write(dir.join("eval.json"), result.to_json()?)?;
        std::fs::write(dir.join("cmc.csv"), result.to_csv())?;
    }
    Ok(RunOutcome { curve, result, store, net })
}

/// `epoch_NNN.ckpt`; epoch 0 holds the initial weights.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// A named structural/loss variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: &'static str,
    pub ablation: Ablation,
    pub metric: MetricLoss,
}

/// Ablation rows, from the plain global-pooling baseline to the full model.
pub fn ablation_variants() -> Vec<Variant> {
    let v = |name, multi_level, parts, relation, metric| Variant {
        name,
        ablation: Ablation { multi_level, parts, relation },
        metric,
    };
    use MetricLoss::{Bdtr, Cq};
    use RelationMode::{Fused, Off, Only};
    vec![
        v("baseline", false, false, Off, Bdtr),
        v("+ML", true, false, Off, Bdtr),
        v("+P", false, true, Off, Bdtr),
        v("+ML+P", true, true, Off, Bdtr),
        v("RF-only", true, true, Only, Bdtr),
        v("+RF", true, true, Fused, Bdtr),
        v("+RF+CQ", true, true, Fused, Cq),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub rank1: Vec<f64>,
    pub map: Vec<f64>,
    pub median_rank1: f64,
    pub median_map: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Train every variant with every seed (data fixed, seed drives
/// initialization, sampling and flips) and report medians.
pub fn run_ablation(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut progress: impl FnMut(&str, u64, &RunOutcome),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for var in variants {
        let mut cfg = base.clone();
        cfg.ablation = var.ablation;
        cfg.metric = var.metric;
        let (mut r1, mut map) = (Vec::new(), Vec::new());
        for &seed in seeds {
            cfg.seed = seed;
            let out = run(&cfg, None)?;
            progress(var.name, seed, &out);
            r1.push(out.rank1());
            map.push(out.result.map);
        }
        rows.push(AblationRow {
            name: var.name.to_string(),
            median_rank1: median(&r1),
            median_map: median(&map),
            rank1: r1,
            map,
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<10} {:>8} {:>8}\n", "variant", "rank-1", "mAP");
    for r in rows {
        s.push_str(&format!("{:<10} {:>8.4} {:>8.4}\n", r.name, r.median_rank1, r.median_map));
    }
    s
}
