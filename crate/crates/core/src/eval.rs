//! Cross-modality retrieval evaluation: distance matrices, CMC and mAP.
//!
//! Rankings sort gallery items by ascending distance; equal distances keep
//! ascending gallery index order.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{half_sq_dist, ParamStore};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::network::Mtmfe;
use crate::tensor::Tensor;

/// Worker count for parallel evaluation: `XMODAL_THREADS` if set, else the
/// machine's available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("XMODAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Row-chunked parallel map over `0..rows`, each worker producing whole rows.
fn par_rows(rows: usize, cols: usize, threads: usize, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    if rows == 0 || cols == 0 {
        return out;
    }
    let threads = threads.clamp(1, rows);
    let per = rows.div_ceil(threads);
    std::thread::scope(|s| {
        for (chunk_idx, chunk) in out.chunks_mut(per * cols).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (r, row) in chunk.chunks_mut(cols).enumerate() {
                    f(chunk_idx * per + r, row);
                }
            });
        }
    });
    out
}

/// `[Q, G]` matrix of `D(q_i, g_j) = |q_i - g_j|^2 / 2`.
pub fn distance_matrix(query: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    distance_matrix_with_threads(query, gallery, eval_threads())
}

pub fn distance_matrix_with_threads(query: &Tensor, gallery: &Tensor, threads: usize) -> Result<Tensor> {
    if query.rank() != 2 || gallery.rank() != 2 || query.shape()[1] != gallery.shape()[1] {
        return Err(Error::Shape {
            op: "distance_matrix",
            detail: format!("query {:?} vs gallery {:?}", query.shape(), gallery.shape()),
        });
    }
    let (q, g) = (query.shape()[0], gallery.shape()[0]);
    let data = par_rows(q, g, threads, |i, row| {
        let qi = query.row(i);
        for (j, d) in row.iter_mut().enumerate() {
            *d = half_sq_dist(qi, gallery.row(j));
        }
    });
    Tensor::new(vec![q, g], data)
}

fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable: ties stay in index order
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
    order
}

fn check_dims(dist: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<(usize, usize)> {
    if dist.rank() != 2 || dist.shape() != [query_ids.len(), gallery_ids.len()] {
        return Err(Error::Shape {
            op: "retrieval",
            detail: format!(
                "distances {:?} for {} queries and {} gallery items",
                dist.shape(),
                query_ids.len(),
                gallery_ids.len()
            ),
        });
    }
    Ok((query_ids.len(), gallery_ids.len()))
}

/// 1-based ranks of the relevant gallery items for each query.
fn relevant_ranks(dist: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<Vec<Vec<usize>>> {
    let (q, _) = check_dims(dist, query_ids, gallery_ids)?;
    (0..q)
        .map(|i| {
            let ranks: Vec<usize> = ranking(dist.row(i))
                .into_iter()
                .enumerate()
                .filter(|&(_, j)| gallery_ids[j] == query_ids[i])
                .map(|(r, _)| r + 1)
                .collect();
            if ranks.is_empty() {
                Err(Error::Eval(format!(
                    "query {i} (identity {}) has no relevant gallery item",
                    query_ids[i]
                )))
            } else {
                Ok(ranks)
            }
        })
        .collect()
}

/// `cmc[r - 1]` = fraction of queries whose first relevant item is within the top `r`.
pub fn cmc_curve(dist: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<Vec<f64>> {
    let ranks = relevant_ranks(dist, query_ids, gallery_ids)?;
    let g = gallery_ids.len();
    let mut hits = vec![0usize; g];
    for r in &ranks {
        hits[r[0] - 1] += 1;
    }
    let q = ranks.len() as f64;
    let mut acc = 0;
    Ok(hits
        .into_iter()
        .map(|h| {
            acc += h;
            acc as f64 / q
        })
        .collect())
}

/// Per-query average precision: mean over relevant items of precision at their rank.
pub fn average_precisions(dist: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<Vec<f64>> {
    let ranks = relevant_ranks(dist, query_ids, gallery_ids)?;
    Ok(ranks
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(i, &rank)| (i + 1) as f64 / rank as f64)
                .sum::<f64>()
                / r.len() as f64
        })
        .collect())
}

pub fn mean_ap(dist: &Tensor, query_ids: &[u32], gallery_ids: &[u32]) -> Result<f64> {
    let ap = average_precisions(dist, query_ids, gallery_ids)?;
    Ok(ap.iter().sum::<f64>() / ap.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GalleryMode {
    SingleShot,
    MultiShot,
}

impl FromStr for GalleryMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "single_shot" => Ok(GalleryMode::SingleShot),
            "multi" | "multi_shot" => Ok(GalleryMode::MultiShot),
            o => Err(Error::Config(format!("unknown gallery mode `{o}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// IR queries against an RGB gallery.
    Ir2Rgb,
    /// RGB queries against an IR gallery.
    Rgb2Ir,
}

impl Direction {
    pub fn query(self) -> Modality {
        match self {
            Direction::Ir2Rgb => Modality::Ir,
            Direction::Rgb2Ir => Modality::Rgb,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ir2rgb" => Ok(Direction::Ir2Rgb),
            "rgb2ir" => Ok(Direction::Rgb2Ir),
            o => Err(Error::Config(format!("unknown direction `{o}`"))),
        }
    }
}

/// Which gallery samples may be drawn; stands in for camera-subset rules.
pub type GalleryFilter<'a> = &'a (dyn Fn(&Sample) -> bool + Sync);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: GalleryMode,
    /// Gallery images per identity in multi-shot mode.
    pub shots: usize,
    pub redraws: usize,
    pub direction: Direction,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: GalleryMode::SingleShot,
            shots: 10,
            redraws: 10,
            direction: Direction::Ir2Rgb,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn effective_shots(&self) -> usize {
        match self.mode {
            GalleryMode::SingleShot => 1,
            GalleryMode::MultiShot => self.shots,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Distances of the last gallery draw.
    pub distances: Tensor,
    /// Mean over draws; `cmc[r - 1]` is rank-`r` accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Per-query AP, mean over draws.
    pub per_query_ap: Vec<f64>,
    pub options: EvalOptions,
}

/// Serialized form of a [`RetrievalResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: GalleryMode,
    pub shots: usize,
    pub redraws: usize,
    pub direction: Direction,
    pub cmc: Vec<f64>,
    pub map: f64,
    pub seed: u64,
}

impl RetrievalResult {
    pub fn rank(&self, r: usize) -> f64 {
        self.cmc[(r.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            mode: self.options.mode,
            shots: self.options.effective_shots(),
            redraws: self.options.redraws,
            direction: self.options.direction,
            cmc: self.cmc.clone(),
            map: self.map,
            seed: self.options.seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.report())?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,cmc\n");
        for (i, v) in self.cmc.iter().enumerate() {
            let _ = writeln!(s, "{},{}", i + 1, v);
        }
        s
    }
}

/// Descriptors for every sample of `dataset`, row `i` for sample `i`.
pub fn describe_dataset(net: &Mtmfe, store: &ParamStore, dataset: &Dataset) -> Result<Tensor> {
    const CHUNK: usize = 64;
    let dim = net.descriptor_dim();
    let mut out = Tensor::zeros(&[dataset.len(), dim]);
    let mut jobs = Vec::new();
    for m in Modality::ALL {
        let idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples()[i].modality == m)
            .collect();
        for c in idx.chunks(CHUNK) {
            jobs.push((m, c.to_vec()));
        }
    }
    let threads = eval_threads().clamp(1, jobs.len().max(1));
    let results: Vec<Result<Tensor>> = if threads == 1 {
        jobs.iter()
            .map(|(m, idx)| net.describe(store, &dataset.stack(idx), *m))
            .collect()
    } else {
        let per = jobs.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .chunks(per)
                .map(|group| {
                    s.spawn(move || {
                        group
                            .iter()
                            .map(|(m, idx)| net.describe(store, &dataset.stack(idx), *m))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("descriptor worker panicked"))
                .collect()
        })
    };
    for ((_, idx), res) in jobs.iter().zip(results) {
        let d = res?;
        for (r, &i) in idx.iter().enumerate() {
            out.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(d.row(r));
        }
    }
    Ok(out)
}

/// Retrieval protocol over precomputed descriptors (`[dataset.len(), d]`).
///
/// Queries are every sample of the query modality. Each draw picks
/// `effective_shots` gallery samples per identity from the other modality;
/// every gallery sample of the query's identity counts as relevant.
pub fn evaluate_descriptors(
    descriptors: &Tensor,
    dataset: &Dataset,
    opts: &EvalOptions,
    gallery_filter: Option<GalleryFilter<'_>>,
) -> Result<RetrievalResult> {
    if descriptors.rank() != 2 || descriptors.shape()[0] != dataset.len() {
        return Err(Error::Shape {
            op: "evaluate",
            detail: format!(
                "{:?} descriptors for {} samples",
                descriptors.shape(),
                dataset.len()
            ),
        });
    }
    if opts.redraws == 0 {
        return Err(Error::Eval("redraws must be at least 1".into()));
    }
    let shots = opts.effective_shots();
    if shots == 0 {
        return Err(Error::Eval("shots must be at least 1".into()));
    }
    let qm = opts.direction.query();
    let gm = qm.other();
    let samples = dataset.samples();
    let query_idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].modality == qm).collect();
    if query_idx.is_empty() {
        return Err(Error::Eval(format!("dataset has no {qm} images to query with")));
    }
    let mut pools = Vec::new();
    for id in dataset.identities() {
        let pool: Vec<usize> = dataset
            .indices(id, gm)
            .iter()
            .copied()
            .filter(|&i| gallery_filter.is_none_or(|f| f(&samples[i])))
            .collect();
        if pool.len() < shots {
            return Err(Error::Eval(format!(
                "identity {id} has {} eligible {gm} gallery images, {shots} needed",
                pool.len()
            )));
        }
        pools.push(pool);
    }

    let dim = descriptors.shape()[1];
    let gather = |idx: &[usize]| -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend_from_slice(descriptors.row(i));
        }
        Tensor::new(vec![idx.len(), dim], data).expect("consistent rows")
    };
    let queries = gather(&query_idx);
    let query_ids: Vec<u32> = query_idx.iter().map(|&i| samples[i].id).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cmc: Vec<f64> = Vec::new();
    let mut ap = vec![0.0; query_idx.len()];
    let mut last = None;
    for _ in 0..opts.redraws {
        let gallery_idx: Vec<usize> = pools
            .iter()
            .flat_map(|pool| {
                crate::data::pick(&mut rng, pool.len(), shots)
                    .into_iter()
                    .map(|j| pool[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        let gallery_ids: Vec<u32> = gallery_idx.iter().map(|&i| samples[i].id).collect();
        let dist = distance_matrix(&queries, &gather(&gallery_idx))?;
        let c = cmc_curve(&dist, &query_ids, &gallery_ids)?;
        if cmc.is_empty() {
            cmc = vec![0.0; c.len()];
        }
        for (a, v) in cmc.iter_mut().zip(&c) {
            *a += v / opts.redraws as f64;
        }
        for (a, v) in ap.iter_mut().zip(average_precisions(&dist, &query_ids, &gallery_ids)?) {
            *a += v / opts.redraws as f64;
        }
        last = Some(dist);
    }
    let map = ap.iter().sum::<f64>() / ap.len() as f64;
    Ok(RetrievalResult {
        distances: last.expect("at least one draw"),
        cmc,
        map,
        per_query_ap: ap,
        options: *opts,
    })
}

/// Describe every sample with the network, then run [`evaluate_descriptors`].
pub fn evaluate(
    net: &Mtmfe,
    store: &ParamStore,
    dataset: &Dataset,
    opts: &EvalOptions,
    gallery_filter: Option<GalleryFilter<'_>>,
) -> Result<RetrievalResult> {
    let descriptors = describe_dataset(net, store, dataset)?;
    evaluate_descriptors(&descriptors, dataset, opts, gallery_filter)
}
