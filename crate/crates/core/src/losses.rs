//! Batch-hard metric losses and the combined training objective.
//!
//! Distances are `D(x, y) = |x - y|^2 / 2`. Every hinge is `max(0, ·)` and
//! terms are summed (not averaged) over anchors. Each row of the batch acts
//! as an anchor; its positives and negatives are mined inside the batch.

use serde::{Deserialize, Serialize};

use crate::autograd::{half_sq_dist, Tape, Triple, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::network::PartOutput;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Margin of the cross-modality top-ranking loss.
    pub rho1: f64,
    /// Margin of the cross-modality quadruplet loss.
    pub rho2: f64,
    /// Margin of the single-modality triplet loss.
    pub rho3: f64,
    /// L2-normalize embeddings before the metric losses.
    pub normalize_inputs: bool,
    /// How per-anchor hinge terms are combined inside [`total_loss`].
    pub anchor_reduction: Reduction,
}

/// Combination of per-anchor hinge terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    /// Sum divided by the number of rows in the batch.
    Mean,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            rho1: 0.3,
            rho2: 0.3,
            rho3: 0.3,
            normalize_inputs: true,
            anchor_reduction: Reduction::Sum,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("rho1", self.rho1), ("rho2", self.rho2), ("rho3", self.rho3)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidValue {
                    key: k.into(),
                    detail: format!("margin must be finite and >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Cross-modality term used by the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricLoss {
    Bdtr,
    Cq,
}

/// `|x - y|^2 / 2`.
pub fn sq_euclidean(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "sq_euclidean",
            detail: format!("lengths {} and {}", x.len(), y.len()),
        });
    }
    Ok(half_sq_dist(x, y))
}

/// Hardest candidates for one anchor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnchorMining {
    /// Farthest same-identity sample of the other modality.
    pub cross_pos: Option<usize>,
    /// Nearest other-identity sample of the other modality.
    pub cross_neg: Option<usize>,
    /// Farthest same-identity sample of the same modality (excluding itself).
    pub intra_pos: Option<usize>,
    /// Nearest other-identity sample of the same modality.
    pub intra_neg: Option<usize>,
}

/// Batch-hard selections for every row of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinedIndices {
    pub anchors: Vec<AnchorMining>,
}

fn check_labels(x: &Tensor, ids: &[usize], modalities: &[Modality]) -> Result<()> {
    if x.rank() != 2 || x.shape()[0] != ids.len() || ids.len() != modalities.len() {
        return Err(Error::Shape {
            op: "mining",
            detail: format!(
                "features {:?} with {} ids and {} modality labels",
                x.shape(),
                ids.len(),
                modalities.len()
            ),
        });
    }
    Ok(())
}

/// Batch-hard mining on the rows of `x [B, d]`. Ties resolve to the lowest index.
pub fn mine(x: &Tensor, ids: &[usize], modalities: &[Modality]) -> Result<MinedIndices> {
    check_labels(x, ids, modalities)?;
    let b = ids.len();
    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let d = half_sq_dist(x.row(i), x.row(j));
            dist[i * b + j] = d;
            dist[j * b + i] = d;
        }
    }
    let anchors = (0..b)
        .map(|a| {
            let mut m = AnchorMining::default();
            let mut best = [f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY];
            for j in 0..b {
                if j == a {
                    continue;
                }
                let d = dist[a * b + j];
                let same_id = ids[j] == ids[a];
                let cross = modalities[j] != modalities[a];
                let (slot, farthest) = match (cross, same_id) {
                    (true, true) => (0, true),
                    (true, false) => (1, false),
                    (false, true) => (2, true),
                    (false, false) => (3, false),
                };
                let better = if farthest { d > best[slot] } else { d < best[slot] };
                if better {
                    best[slot] = d;
                    let target = match slot {
                        0 => &mut m.cross_pos,
                        1 => &mut m.cross_neg,
                        2 => &mut m.intra_pos,
                        _ => &mut m.intra_neg,
                    };
                    *target = Some(j);
                }
            }
            m
        })
        .collect();
    Ok(MinedIndices { anchors })
}

fn prepare(
    tape: &mut Tape,
    features: Var,
    ids: &[usize],
    modalities: &[Modality],
    normalize: bool,
) -> Result<(Var, MinedIndices)> {
    let x = if normalize {
        tape.l2_normalize(features, NORM_EPS)?
    } else {
        features
    };
    let mined = mine(tape.value(x), ids, modalities)?;
    Ok((x, mined))
}

fn need(v: Option<usize>, anchor: usize, what: &str) -> Result<usize> {
    v.ok_or_else(|| Error::Mining(format!("anchor {anchor} has no {what}")))
}

fn cross_triples(mined: &MinedIndices) -> Result<Vec<Triple>> {
    mined
        .anchors
        .iter()
        .enumerate()
        .map(|(a, m)| {
            Ok(Triple {
                anchor: a,
                positive: need(m.cross_pos, a, "cross-modality positive")?,
                negative: need(m.cross_neg, a, "cross-modality negative")?,
            })
        })
        .collect()
}

/// Bi-directional top-ranking loss: hardest cross-modality positive against
/// hardest cross-modality negative, for anchors of both modalities.
pub fn bdtr_loss(
    tape: &mut Tape,
    features: Var,
    ids: &[usize],
    modalities: &[Modality],
    rho1: f64,
    normalize: bool,
) -> Result<Var> {
    let (x, mined) = prepare(tape, features, ids, modalities, normalize)?;
    let triples = cross_triples(&mined)?;
    tape.hinge_triplets(x, &triples, rho1)
}

/// Cross-modality quadruplet loss: the top-ranking constraints plus the
/// hardest cross-modality positive against the hardest same-modality negative.
pub fn cq_loss(
    tape: &mut Tape,
    features: Var,
    ids: &[usize],
    modalities: &[Modality],
    rho2: f64,
    normalize: bool,
) -> Result<Var> {
    let (x, mined) = prepare(tape, features, ids, modalities, normalize)?;
    let mut triples = cross_triples(&mined)?;
    for (a, m) in mined.anchors.iter().enumerate() {
        triples.push(Triple {
            anchor: a,
            positive: need(m.cross_pos, a, "cross-modality positive")?,
            negative: need(m.intra_neg, a, "same-modality negative")?,
        });
    }
    tape.hinge_triplets(x, &triples, rho2)
}

/// Single-modality triplet loss with batch-hard mining inside each modality.
pub fn smt_loss(
    tape: &mut Tape,
    features: Var,
    ids: &[usize],
    modalities: &[Modality],
    rho3: f64,
    normalize: bool,
) -> Result<Var> {
    let (x, mined) = prepare(tape, features, ids, modalities, normalize)?;
    let triples = mined
        .anchors
        .iter()
        .enumerate()
        .map(|(a, m)| {
            Ok(Triple {
                anchor: a,
                positive: need(m.intra_pos, a, "same-modality positive")?,
                negative: need(m.intra_neg, a, "same-modality negative")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    tape.hinge_triplets(x, &triples, rho3)
}

/// Loss values of one `(level, part)` slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub level: usize,
    pub part: usize,
    /// Cross-modality metric term (quadruplet or top-ranking, see [`LossBreakdown::metric`]).
    pub cq: f64,
    pub st: f64,
    pub id_rgb: f64,
    pub id_ir: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub metric: MetricLoss,
    pub terms: Vec<TermBreakdown>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Sum over every `(level, part)` slot of the cross-modality metric loss, the
/// single-modality triplet loss and the identification loss on RGB and IR rows.
///
/// `ids` are class indices in `[0, num_identities)`.
pub fn total_loss(
    tape: &mut Tape,
    parts: &[PartOutput],
    ids: &[usize],
    modalities: &[Modality],
    cfg: &LossConfig,
    metric: MetricLoss,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if parts.is_empty() {
        return Err(Error::Config("total_loss needs at least one part slot".into()));
    }
    let rows = |m: Modality| -> Vec<(usize, usize)> {
        modalities
            .iter()
            .enumerate()
            .filter(|(_, &mm)| mm == m)
            .map(|(r, _)| (r, ids[r]))
            .collect()
    };
    let (rgb_rows, ir_rows) = (rows(Modality::Rgb), rows(Modality::Ir));

    let mut slot_totals = Vec::with_capacity(parts.len());
    let mut terms = Vec::with_capacity(parts.len());
    for p in parts {
        let n = tape.shape(p.logits)[0];
        if n != ids.len() {
            return Err(Error::Shape {
                op: "total_loss",
                detail: format!("logits for {} rows, {} labels", n, ids.len()),
            });
        }
        let mut cross = match metric {
            MetricLoss::Cq => cq_loss(tape, p.embedding, ids, modalities, cfg.rho2, cfg.normalize_inputs)?,
            MetricLoss::Bdtr => {
                bdtr_loss(tape, p.embedding, ids, modalities, cfg.rho1, cfg.normalize_inputs)?
            }
        };
        let mut st = smt_loss(tape, p.embedding, ids, modalities, cfg.rho3, cfg.normalize_inputs)?;
        if cfg.anchor_reduction == Reduction::Mean {
            let per_row = 1.0 / ids.len() as f64;
            cross = tape.scale(cross, per_row)?;
            st = tape.scale(st, per_row)?;
        }
        let id_rgb = tape.softmax_cross_entropy(p.logits, &rgb_rows)?;
        let id_ir = tape.softmax_cross_entropy(p.logits, &ir_rows)?;
        let slot = tape.sum_scalars(&[cross, st, id_rgb, id_ir])?;
        terms.push(TermBreakdown {
            level: p.level,
            part: p.part,
            cq: tape.value(cross).item(),
            st: tape.value(st).item(),
            id_rgb: tape.value(id_rgb).item(),
            id_ir: tape.value(id_ir).item(),
            total: tape.value(slot).item(),
        });
        slot_totals.push(slot);
    }
    let total = tape.sum_scalars(&slot_totals)?;
    let breakdown = LossBreakdown {
        metric,
        terms,
        total: tape.value(total).item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Modality::{Ir, Rgb};

    fn eval(
        f: fn(&mut Tape, Var, &[usize], &[Modality], f64, bool) -> Result<Var>,
        x: Tensor,
        ids: &[usize],
        mods: &[Modality],
        margin: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let out = f(&mut tape, v, ids, mods, margin, false).unwrap();
        tape.value(out).item()
    }

    fn rows(r: &[[f64; 2]]) -> Tensor {
        Tensor::new(vec![r.len(), 2], r.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(sq_euclidean(&[0.3, -1.0], &[0.3, -1.0]).unwrap(), 0.0);
        assert_eq!(sq_euclidean(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!(sq_euclidean(&[1.0], &[1.0, 2.0]).is_err());
    }

    // id 0 at e1, id 1 at e2, in both modalities, two samples each.
    fn separated() -> (Tensor, Vec<usize>, Vec<Modality>) {
        let x = rows(&[
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0],
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [0.0, 1.0],
        ]);
        (x, vec![0, 0, 1, 1, 0, 0, 1, 1], vec![Rgb, Rgb, Rgb, Rgb, Ir, Ir, Ir, Ir])
    }

    #[test]
    fn separated_clusters_cost_nothing() {
        let (x, ids, mods) = separated();
        assert_eq!(eval(bdtr_loss, x.clone(), &ids, &mods, 0.3), 0.0);
        assert_eq!(eval(cq_loss, x.clone(), &ids, &mods, 0.3), 0.0);
        assert_eq!(eval(smt_loss, x, &ids, &mods, 0.3), 0.0);
    }

    #[test]
    fn collapsed_batch_costs_margin_per_hinge() {
        let (_, ids, mods) = separated();
        let x = Tensor::full(&[8, 2], 0.5);
        let b = 8.0;
        assert!((eval(bdtr_loss, x.clone(), &ids, &mods, 0.3) - 0.3 * b).abs() < 1e-12);
        assert!((eval(smt_loss, x.clone(), &ids, &mods, 0.3) - 0.3 * b).abs() < 1e-12);
        assert!((eval(cq_loss, x, &ids, &mods, 0.3) - 0.6 * b).abs() < 1e-12);
    }

    #[test]
    fn quadruplet_single_anchor_example() {
        // RGB anchor (1,0) of id 0; IR positive (0,1) of id 0; IR negative (1,0)
        // of id 1; RGB negative (1,0) of id 1.
        let x = rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]);
        let ids = [0, 0, 1, 1];
        let mods = [Rgb, Ir, Ir, Rgb];
        let mined = mine(&x, &ids, &mods).unwrap();
        let a = mined.anchors[0];
        assert_eq!((a.cross_pos, a.cross_neg, a.intra_neg), (Some(1), Some(2), Some(3)));
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let t = [
            Triple { anchor: 0, positive: 1, negative: 2 },
            Triple { anchor: 0, positive: 1, negative: 3 },
        ];
        let out = tape.hinge_triplets(v, &t, 0.3).unwrap();
        assert!((tape.value(out).item() - 2.6).abs() < 1e-12);
    }

    #[test]
    fn missing_candidates_are_errors() {
        let x = rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let mut tape = Tape::new();
        let v = tape.constant(x);
        // one identity, so no negatives
        let r = bdtr_loss(&mut tape, v, &[0, 0], &[Rgb, Ir], 0.3, false);
        assert!(matches!(r, Err(Error::Mining(_))));
        let r = smt_loss(&mut tape, v, &[0, 1], &[Rgb, Ir], 0.3, false);
        assert!(matches!(r, Err(Error::Mining(_))));
    }

    #[test]
    fn negative_margin_rejected() {
        let cfg = LossConfig {
            rho2: -0.1,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
