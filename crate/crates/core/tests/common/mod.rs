//! Brute-force oracles and random instance generators shared by the
//! integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use xmodal::autograd::Tape;
use xmodal::losses::{bdtr_loss, cq_loss, smt_loss, AnchorMining};
use xmodal::{Modality, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rank (1-based) of gallery item `j` in a stable ascending sort of `row`.
fn rank_of(row: &[f64], j: usize) -> usize {
    1 + row
        .iter()
        .enumerate()
        .filter(|&(i, &d)| d < row[j] || (d == row[j] && i < j))
        .count()
}

/// CMC by counting, one query at a time.
pub fn cmc_oracle(dist: &Tensor, qids: &[u32], gids: &[u32]) -> Vec<f64> {
    let g = gids.len();
    let mut cmc = vec![0.0; g];
    for (q, &qid) in qids.iter().enumerate() {
        let row = dist.row(q);
        let first = (0..g).filter(|&j| gids[j] == qid).map(|j| rank_of(row, j)).min().unwrap();
        for slot in cmc.iter_mut().skip(first - 1) {
            *slot += 1.0;
        }
    }
    cmc.iter().map(|c| c / qids.len() as f64).collect()
}

/// AP from the textbook definition: precision at each relevant item's rank.
pub fn ap_oracle(row: &[f64], qid: u32, gids: &[u32]) -> f64 {
    let ranks: Vec<usize> = (0..gids.len()).filter(|&j| gids[j] == qid).map(|j| rank_of(row, j)).collect();
    let mut total = 0.0;
    for &r in &ranks {
        let hits_above = ranks.iter().filter(|&&o| o <= r).count();
        total += hits_above as f64 / r as f64;
    }
    total / ranks.len() as f64
}

pub fn map_oracle(dist: &Tensor, qids: &[u32], gids: &[u32]) -> f64 {
    let aps: f64 = qids.iter().enumerate().map(|(q, &id)| ap_oracle(dist.row(q), id, gids)).sum();
    aps / qids.len() as f64
}

/// Random retrieval instance in which every query identity appears in the
/// gallery. Distances are drawn from a small grid half of the time so ties occur.
pub fn retrieval_instance(rng: &mut impl Rng, max_q: usize, max_g: usize) -> (Tensor, Vec<u32>, Vec<u32>) {
    let g = rng.gen_range(2..=max_g);
    let num_ids = rng.gen_range(1..=g.min(6)) as u32;
    let mut gids: Vec<u32> = (0..g).map(|_| rng.gen_range(0..num_ids)).collect();
    for id in 0..num_ids {
        gids[id as usize] = id;
    }
    let q = rng.gen_range(1..=max_q);
    let qids: Vec<u32> = (0..q).map(|_| rng.gen_range(0..num_ids)).collect();
    let coarse = rng.gen_bool(0.5);
    let data = (0..q * g)
        .map(|_| if coarse { rng.gen_range(0..4) as f64 } else { rng.gen::<f64>() })
        .collect();
    (Tensor::new(vec![q, g], data).unwrap(), qids, gids)
}

/// A labelled batch as the losses see it: `n` identities with `k` rows per
/// modality, rows shuffled.
pub struct LossBatch {
    pub x: Tensor,
    pub ids: Vec<usize>,
    pub modalities: Vec<Modality>,
}

pub fn loss_batch(rng: &mut impl Rng, max_n: usize, max_k: usize) -> LossBatch {
    let n = rng.gen_range(2..=max_n);
    let k = rng.gen_range(2..=max_k);
    let dim = rng.gen_range(1..=5);
    let mut rows = Vec::new();
    for id in 0..n {
        for m in Modality::ALL {
            for _ in 0..k {
                rows.push((id, m));
            }
        }
    }
    // Fisher-Yates so labels are not in a convenient order
    for i in (1..rows.len()).rev() {
        let j = rng.gen_range(0..=i);
        rows.swap(i, j);
    }
    let coarse = rng.gen_bool(0.3);
    let data = (0..rows.len() * dim)
        .map(|_| if coarse { rng.gen_range(-1..=1) as f64 } else { rng.gen_range(-1.0..1.0) })
        .collect();
    LossBatch {
        x: Tensor::new(vec![rows.len(), dim], data).unwrap(),
        ids: rows.iter().map(|r| r.0).collect(),
        modalities: rows.iter().map(|r| r.1).collect(),
    }
}

/// Exhaustive batch-hard selection: rank every candidate of each category by
/// `(distance, index)` and take the extreme.
pub fn mining_oracle(x: &Tensor, ids: &[usize], mods: &[Modality]) -> Vec<AnchorMining> {
    let sq = |a: usize, b: usize| -> f64 { x.row(a).iter().zip(x.row(b)).map(|(u, v)| (u - v) * (u - v)).sum() };
    (0..ids.len())
        .map(|a| {
            let pick = |same_id: bool, cross: bool, farthest: bool| -> Option<usize> {
                let mut c: Vec<(f64, usize)> = (0..ids.len())
                    .filter(|&j| j != a && (ids[j] == ids[a]) == same_id && (mods[j] != mods[a]) == cross)
                    .map(|j| (sq(a, j), j))
                    .collect();
                if farthest {
                    c.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
                } else {
                    c.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
                }
                c.first().map(|p| p.1)
            };
            AnchorMining {
                cross_pos: pick(true, true, true),
                cross_neg: pick(false, true, false),
                intra_pos: pick(true, false, true),
                intra_neg: pick(false, false, false),
            }
        })
        .collect()
}

/// `(cq, bdtr, smt)` for one batch at a common margin.
pub fn metric_losses(b: &LossBatch, mods: &[Modality], margin: f64, normalize: bool) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let x = tape.input(b.x.clone());
    let cq = cq_loss(&mut tape, x, &b.ids, mods, margin, normalize).unwrap();
    let bd = bdtr_loss(&mut tape, x, &b.ids, mods, margin, normalize).unwrap();
    let st = smt_loss(&mut tape, x, &b.ids, mods, margin, normalize).unwrap();
    (tape.value(cq).item(), tape.value(bd).item(), tape.value(st).item())
}

pub fn swapped(mods: &[Modality]) -> Vec<Modality> {
    mods.iter().map(|m| m.other()).collect()
}

/// A run small enough to train in well under a second.
pub const TINY_RUN: &str = "\
image_shape = 3,12,6
specific_channels = 4,4,8
specific_strides = 1,2,1
shared_channels = 8,8
level2_stride = 1
depth = 2
relation_channels = 4
num_parts = 3
embed_dim = 8
num_identities = 6
data_images_per_identity = 5
train_per_identity = 3
batch_n = 3
batch_k = 2
epochs = 2
batches_per_epoch = 3
anchor_reduction = mean
lr_specific = 0.003
lr_shared = 0.03
eval_redraws = 3
";

pub fn tiny_config() -> xmodal::config::RunConfig {
    xmodal::config::RunConfig::from_kv(TINY_RUN).unwrap()
}
