use rand::Rng;

use super::dataset::{pick, Dataset};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

/// `N` identities with `K` RGB and `K` IR images each.
///
/// Rows are ordered RGB first, then IR; within a modality identity-major.
/// Every row serves as an anchor; positive and negative pools are read off
/// `ids` and `modalities`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub rgb: Tensor,
    pub ir: Tensor,
    /// Identity of each row (RGB rows then IR rows).
    pub ids: Vec<u32>,
    pub modalities: Vec<Modality>,
    /// Dataset index of each row.
    pub sample_indices: Vec<usize>,
    pub n: usize,
    pub k: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// Draw `n` distinct identities uniformly, then `k` distinct images of each
/// identity in each modality.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &Dataset, n: usize, k: usize, rng: &mut R) -> Result<Batch> {
    if n == 0 || k == 0 {
        return Err(Error::Sampling(format!("N and K must be positive (N={n}, K={k})")));
    }
    let ids = dataset.identities();
    if ids.len() < n {
        return Err(Error::Sampling(format!(
            "dataset has {} identities, batch needs {n}",
            ids.len()
        )));
    }
    let deficient: Vec<String> = ids
        .iter()
        .flat_map(|&id| Modality::ALL.map(|m| (id, m)))
        .filter(|&(id, m)| dataset.indices(id, m).len() < k)
        .map(|(id, m)| format!("identity {id} has {} {m} images", dataset.indices(id, m).len()))
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Sampling(format!(
            "need {k} images per identity and modality: {}",
            deficient.join(", ")
        )));
    }

    let chosen: Vec<u32> = pick(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect();
    let mut rows = Vec::with_capacity(2 * n * k);
    let mut row_ids = Vec::with_capacity(2 * n * k);
    let mut mods = Vec::with_capacity(2 * n * k);
    for m in Modality::ALL {
        for &id in &chosen {
            let pool = dataset.indices(id, m);
            for j in pick(rng, pool.len(), k) {
                rows.push(pool[j]);
                row_ids.push(id);
                mods.push(m);
            }
        }
    }
    let half = n * k;
    Ok(Batch {
        rgb: dataset.stack(&rows[..half]),
        ir: dataset.stack(&rows[half..]),
        ids: row_ids,
        modalities: mods,
        sample_indices: rows,
        n,
        k,
    })
}

/// Mirror a `[C, H, W]` (or `[N, C, H, W]`, per image) tensor left to right
/// with probability `p`.
pub fn augment_flip<R: Rng + ?Sized>(image: &Tensor, p: f64, rng: &mut R) -> Tensor {
    let s = image.shape();
    let w = *s.last().expect("image has a width axis");
    let per_image: usize = match s.len() {
        4 => s[1..].iter().product(),
        _ => image.len(),
    };
    let mut out = image.clone();
    for img in out.data_mut().chunks_mut(per_image) {
        if p > 0.0 && rng.gen_bool(p.min(1.0)) {
            for row in img.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    out
}
