//! Finite-difference gradient audit over every tape operation and a small
//! end-to-end network.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::gradcheck::{check_inputs, check_params};
use crate::autograd::{Tape, Triple, Var};
use crate::error::Result;
use crate::losses::{total_loss, LossConfig, MetricLoss};
use crate::modality::Modality;
use crate::network::{pt2d_var, pt3d_var, Ablation, Mtmfe, MtmfeConfig};
use crate::tensor::Tensor;

/// Finite-difference step used throughout.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Serialize)]
pub struct OpReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub ops: Vec<OpReport>,
    /// Worst relative error per parameter tensor of the micro network.
    pub network: Vec<(String, f64)>,
    pub elapsed: Duration,
}

impl GradcheckReport {
    pub fn op_max(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_err).fold(0.0, f64::max)
    }

    pub fn network_max(&self) -> f64 {
        self.network.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Random values kept at least `gap` away from zero, so kinks stay outside
/// the finite-difference stencil.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        if v.abs() < gap {
            *v = gap.copysign(*v) + *v;
        }
    }
    t
}

/// Scalar readout by a fixed random projection, so every output entry
/// carries a distinct weight.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(tape.shape(x), &mut rng);
    tape.weighted_sum(x, w)
}

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let seed: u64 = rng.gen();
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match op {
        "conv2d" => {
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let (h, w) = (dim(rng, 3, 6), dim(rng, 3, 6));
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = dim(rng, 1, 2);
            let pad = rng.gen_range(0..=k / 2);
            (
                vec![randn(&[n, c, h, w], rng), randn(&[o, c, k, k], rng), randn(&[o], rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                    project(t, y, seed)
                }),
            )
        }
        "conv3d" => {
            let (n, g, o) = (1, dim(rng, 1, 2), dim(rng, 1, 2));
            let (d, h, w) = (dim(rng, 2, 4), dim(rng, 3, 5), dim(rng, 3, 4));
            let stride = [1, dim(rng, 1, 2), dim(rng, 1, 2)];
            (
                vec![randn(&[n, g, d, h, w], rng), randn(&[o, g, 3, 3, 3], rng), randn(&[o], rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.conv3d(v[0], v[1], v[2], stride, [1, 1, 1])?;
                    project(t, y, seed)
                }),
            )
        }
        "relu" => (
            vec![away_from_zero(&[dim(rng, 1, 4), dim(rng, 1, 6)], 1e-3, rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.relu(v[0])?;
                project(t, y, seed)
            }),
        ),
        "add" => {
            let s = [dim(rng, 1, 3), dim(rng, 1, 5)];
            (
                vec![randn(&s, rng), randn(&s, rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.add(v[0], v[1])?;
                    project(t, y, seed)
                }),
            )
        }
        "scale" => {
            let f: f64 = rng.gen_range(-2.0..2.0);
            (
                vec![randn(&[dim(rng, 1, 3), dim(rng, 1, 5)], rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.scale(v[0], f)?;
                    project(t, y, seed)
                }),
            )
        }
        "concat" => {
            let axis = rng.gen_range(0..3);
            let mut a = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            let x = randn(&a, rng);
            a[axis] = dim(rng, 1, 3);
            (
                vec![x, randn(&a, rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.concat(v, axis)?;
                    project(t, y, seed)
                }),
            )
        }
        "pt3d_pt2d" => {
            let d = dim(rng, 1, 3);
            let s = [dim(rng, 1, 2), d * dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
            (
                vec![randn(&s, rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let lifted = pt3d_var(t, v[0], d)?;
                    let sq = t.relu(lifted)?;
                    let both = t.add(sq, lifted)?;
                    let y = pt2d_var(t, both)?;
                    project(t, y, seed)
                }),
            )
        }
        "band_avg_pool" => {
            let h = dim(rng, 2, 6);
            let start = rng.gen_range(0..h);
            let end = rng.gen_range(start + 1..=h);
            (
                vec![randn(&[dim(rng, 1, 2), dim(rng, 1, 3), h, dim(rng, 1, 4)], rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.band_avg_pool(v[0], start, end)?;
                    project(t, y, seed)
                }),
            )
        }
        "global_avg_pool" => (
            vec![randn(&[dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4)], rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, seed)
            }),
        ),
        "fully_connected" => {
            let (n, i, o) = (dim(rng, 1, 4), dim(rng, 1, 5), dim(rng, 1, 4));
            (
                vec![randn(&[n, i], rng), randn(&[o, i], rng), randn(&[o], rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| {
                    let y = t.fully_connected(v[0], v[1], v[2])?;
                    project(t, y, seed)
                }),
            )
        }
        "l2_normalize" => (
            vec![randn(&[dim(rng, 1, 4), dim(rng, 2, 6)], rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = t.l2_normalize(v[0], 1e-12)?;
                project(t, y, seed)
            }),
        ),
        "softmax_cross_entropy" => {
            let (n, k) = (dim(rng, 1, 5), dim(rng, 2, 6));
            let rows: Vec<(usize, usize)> = (0..n).map(|r| (r, rng.gen_range(0..k))).collect();
            (
                vec![randn(&[n, k], rng)],
                Box::new(move |t: &mut Tape, v: &[Var]| t.softmax_cross_entropy(v[0], &rows)),
            )
        }
        "hinge_triplets" => {
            let (n, d) = (dim(rng, 3, 6), dim(rng, 2, 4));
            let x = randn(&[n, d], rng);
            let triples: Vec<Triple> = (0..dim(rng, 1, 6))
                .map(|_| Triple {
                    anchor: rng.gen_range(0..n),
                    positive: rng.gen_range(0..n),
                    negative: rng.gen_range(0..n),
                })
                .collect();
            // keep every hinge clearly active or clearly inactive
            let half = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| 0.5 * (u - v).powi(2)).sum::<f64>();
            let mut margin = rng.gen_range(0.0..1.0);
            while triples.iter().any(|t| {
                let z = margin + half(x.row(t.anchor), x.row(t.positive)) - half(x.row(t.anchor), x.row(t.negative));
                z.abs() < 1e-3
            }) {
                margin += 0.01;
            }
            (
                vec![x],
                Box::new(move |t: &mut Tape, v: &[Var]| t.hinge_triplets(v[0], &triples, margin)),
            )
        }
        "sum_scalars" => (
            vec![randn(&[dim(rng, 1, 4)], rng), randn(&[dim(rng, 1, 4)], rng)],
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let a = project(t, v[0], seed)?;
                let b = project(t, v[1], seed ^ 1)?;
                let aa = t.scale(a, 2.0)?;
                t.sum_scalars(&[aa, b, a])
            }),
        ),
        other => unreachable!("no gradcheck case for {other}"),
    }
}

pub const OPS: [&str; 14] = [
    "conv2d",
    "conv3d",
    "relu",
    "add",
    "scale",
    "concat",
    "pt3d_pt2d",
    "band_avg_pool",
    "global_avg_pool",
    "fully_connected",
    "l2_normalize",
    "softmax_cross_entropy",
    "hinge_triplets",
    "sum_scalars",
];

/// `cases` random shapes per operation.
pub fn check_ops(seed: u64, cases: usize) -> Result<Vec<OpReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for op in OPS {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let (inputs, build) = op_case(op, &mut rng);
            worst = worst.max(check_inputs(&inputs, STEP, build)?);
        }
        out.push(OpReport { op, cases, max_rel_err: worst });
    }
    Ok(out)
}

/// Two identities, both feature levels, parts and fused relation features.
pub fn micro_config() -> MtmfeConfig {
    MtmfeConfig {
        image_shape: [2, 8, 4],
        specific_channels: [2, 2, 4],
        specific_strides: [1, 2, 1],
        shared_channels: [4, 4],
        level2_stride: 1,
        depth: 2,
        relation_channels: 4,
        num_parts: 2,
        num_identities: 2,
        embed_dim: 3,
    }
}

/// End-to-end check of every parameter tensor of the micro network under the
/// full training loss.
pub fn check_network(seed: u64, coords_per_param: usize) -> Result<Vec<(String, f64)>> {
    let net = Mtmfe::new(micro_config(), Ablation::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = net.init_params(&mut rng);
    let s = micro_config().image_shape;
    let rgb = randn(&[4, s[0], s[1], s[2]], &mut rng);
    let ir = randn(&[4, s[0], s[1], s[2]], &mut rng);
    let ids = [0, 0, 1, 1, 0, 0, 1, 1];
    let mods: Vec<Modality> = [Modality::Rgb; 4].into_iter().chain([Modality::Ir; 4]).collect();
    let cfg = LossConfig::default();
    let reports = check_params(&store, STEP, coords_per_param, |tape, store| {
        let bundle = net.forward(tape, store, &rgb, &ir)?;
        let (loss, _) = total_loss(tape, &bundle.parts, &ids, &mods, &cfg, MetricLoss::Cq)?;
        Ok(loss)
    })?;
    Ok(reports.into_iter().map(|r| (r.name, r.max_rel_err)).collect())
}

pub fn run(seed: u64, cases_per_op: usize, coords_per_param: usize) -> Result<GradcheckReport> {
    let start = Instant::now();
    let ops = check_ops(seed, cases_per_op)?;
    let network = check_network(seed, coords_per_param)?;
    Ok(GradcheckReport {
        ops,
        network,
        elapsed: start.elapsed(),
    })
}
