use rand::Rng;

use super::config::{part_bands, Ablation, MtmfeConfig, RelationMode, ShapePlan};
use super::projection::{pt2d_var, pt3d_var};
use crate::autograd::{ParamGroup, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

/// Embedding and identity logits of one row band at one level.
#[derive(Debug, Clone, Copy)]
pub struct PartOutput {
    /// 1 or 2.
    pub level: usize,
    /// 1-based band index, top to bottom.
    pub part: usize,
    pub embedding: Var,
    pub logits: Var,
}

/// Every intermediate map of a forward pass, as tape handles.
///
/// Relation handles are `None` when the ablation disables relation features;
/// `fa2` is `None` when only relation features are used.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub f: Var,
    pub fa1: Var,
    pub fa2: Option<Var>,
    pub fi11: Option<Var>,
    pub fi12: Option<Var>,
    pub fi1: Option<Var>,
    pub fi2: Option<Var>,
    pub fs1: Var,
    pub fs2: Var,
    pub parts: Vec<PartOutput>,
}

/// The two-stream network: weight-unshared modality stems feeding a shared
/// appearance stream, a shared 3D relation stream and per-band heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Mtmfe {
    config: MtmfeConfig,
    ablation: Ablation,
    plan: ShapePlan,
}

fn conv_name(prefix: &str, layer: usize) -> (String, String) {
    (format!("{prefix}.conv{layer}.weight"), format!("{prefix}.conv{layer}.bias"))
}

fn stream_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Rgb => "rgb",
        Modality::Ir => "ir",
    }
}

/// `"shared.a.conv1.weight"` to `"shared.a.conv1"`.
fn layer_of(weight_name: &str) -> &str {
    weight_name.strip_suffix(".weight").unwrap_or(weight_name)
}

fn head_name(level: usize, part: usize, kind: &str) -> (String, String) {
    (
        format!("part.l{level}.p{part}.{kind}.weight"),
        format!("part.l{level}.p{part}.{kind}.bias"),
    )
}

fn init_layer<R: Rng + ?Sized>(
    store: &mut ParamStore,
    names: (String, String),
    group: ParamGroup,
    weight_shape: &[usize],
    rng: &mut R,
) {
    let fan_in: usize = weight_shape[1..].iter().product();
    let w_bound = (6.0 / fan_in as f64).sqrt();
    let b_bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(names.0, group, Tensor::uniform(weight_shape, w_bound, rng));
    store.insert(names.1, group, Tensor::uniform(&[weight_shape[0]], b_bound, rng));
}

impl Mtmfe {
    pub fn new(config: MtmfeConfig, ablation: Ablation) -> Result<Self> {
        let plan = config.validate(&ablation)?;
        Ok(Self {
            config,
            ablation,
            plan,
        })
    }

    pub fn config(&self) -> &MtmfeConfig {
        &self.config
    }

    pub fn ablation(&self) -> &Ablation {
        &self.ablation
    }

    pub fn plan(&self) -> &ShapePlan {
        &self.plan
    }

    pub fn num_parts(&self) -> usize {
        self.config.parts_for(&self.ablation)
    }

    /// `(level, part)` slots produced per image.
    pub fn slots(&self) -> Vec<(usize, usize)> {
        let parts = self.num_parts();
        self.ablation
            .levels()
            .iter()
            .flat_map(|&l| (1..=parts).map(move |k| (l, k)))
            .collect()
    }

    /// Length of the inference descriptor.
    pub fn descriptor_dim(&self) -> usize {
        self.slots().len() * self.config.embed_dim
    }

    /// Fresh parameters for exactly the layers this ablation uses.
    ///
    /// Weights are uniform in `±sqrt(6 / fan_in)`, biases in `±1 / sqrt(fan_in)`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let cfg = &self.config;
        let mut store = ParamStore::new();
        // Both stems start from one draw, the way two streams would both start
        // from one pretrained backbone; they diverge during training.
        let mut cin = cfg.image_shape[0];
        for (i, &cout) in cfg.specific_channels.iter().enumerate() {
            let names = conv_name(stream_prefix(Modality::Rgb), i + 1);
            init_layer(&mut store, names.clone(), ParamGroup::ModalitySpecific, &[cout, cin, 3, 3], rng);
            let (w, b) = (store.id(&names.0), store.id(&names.1));
            let (w, b) = (w.expect("just inserted"), b.expect("just inserted"));
            let (w, b) = (store.value(w).clone(), store.value(b).clone());
            let ir = conv_name(stream_prefix(Modality::Ir), i + 1);
            store.insert(ir.0, ParamGroup::ModalitySpecific, w);
            store.insert(ir.1, ParamGroup::ModalitySpecific, b);
            cin = cout;
        }
        let c_f = cfg.specific_channels[2];
        let [ca1, ca2] = cfg.shared_channels;
        init_layer(&mut store, conv_name("shared.a", 1), ParamGroup::Shared, &[ca1, c_f, 3, 3], rng);
        if self.ablation.uses_appearance() {
            init_layer(&mut store, conv_name("shared.a", 2), ParamGroup::Shared, &[ca2, ca1, 3, 3], rng);
        }
        if self.ablation.uses_relation() {
            let g = cfg.relation_groups();
            let blocks = [
                ("rel.d1", c_f / cfg.depth),
                ("rel.d2", ca1 / cfg.depth),
                ("rel.d3", g),
            ];
            for (prefix, gin) in blocks {
                init_layer(&mut store, conv_name(prefix, 1), ParamGroup::Shared, &[g, gin, 3, 3, 3], rng);
                init_layer(&mut store, conv_name(prefix, 2), ParamGroup::Shared, &[g, g, 3, 3, 3], rng);
            }
        }
        for (level, part) in self.slots() {
            let cin = if level == 1 { self.plan.fs1[0] } else { self.plan.fs2[0] };
            init_layer(
                &mut store,
                head_name(level, part, "embed"),
                ParamGroup::Shared,
                &[cfg.embed_dim, cin],
                rng,
            );
            // Classifiers start at zero: uniform initial predictions leave the
            // identity loss no incentive to shrink the features feeding them.
            let (w, b) = head_name(level, part, "cls");
            store.insert(w, ParamGroup::Shared, Tensor::zeros(&[cfg.num_identities, cfg.embed_dim]));
            store.insert(b, ParamGroup::Shared, Tensor::zeros(&[cfg.num_identities]));
        }
        store
    }

    fn param(&self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        let id: ParamId = store
            .id(name)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` missing from store")))?;
        Ok(tape.param(store, id))
    }

    fn conv2d_relu(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        names: (String, String),
        stride: usize,
    ) -> Result<Var> {
        let w = self.param(tape, store, &names.0)?;
        let b = self.param(tape, store, &names.1)?;
        let y = tape.conv2d(x, w, b, stride, 1)?;
        tape.label(layer_of(&names.0), y);
        tape.relu(y)
    }

    /// Two stacked 3x3x3 convolutions, ReLU after each; the first applies
    /// `spatial_stride` in H and W.
    fn relation_block(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        prefix: &str,
        spatial_stride: usize,
    ) -> Result<Var> {
        let mut y = x;
        for (layer, stride) in [(1, spatial_stride), (2, 1)] {
            let (wn, bn) = conv_name(prefix, layer);
            let w = self.param(tape, store, &wn)?;
            let b = self.param(tape, store, &bn)?;
            y = tape.conv3d(y, w, b, [1, stride, stride], [1, 1, 1])?;
            tape.label(layer_of(&wn), y);
            y = tape.relu(y)?;
        }
        Ok(y)
    }

    /// Modality-specific stem on `[N, C, H, W]` images, producing `F`.
    pub fn forward_specific(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: Var,
        modality: Modality,
    ) -> Result<Var> {
        let s = tape.shape(images);
        if s.len() != 4 || s[1..] != self.config.image_shape[..] {
            return Err(Error::Shape {
                op: "forward_specific",
                detail: format!(
                    "images {:?} do not match [N, {:?}]",
                    s, self.config.image_shape
                ),
            });
        }
        let mut x = images;
        for (i, &stride) in self.config.specific_strides.iter().enumerate() {
            x = self.conv2d_relu(tape, store, x, conv_name(stream_prefix(modality), i + 1), stride)?;
        }
        Ok(x)
    }

    /// Shared appearance and relation streams plus part heads on `F`.
    pub fn forward_shared(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<FeatureBundle> {
        let cfg = &self.config;
        let s2 = cfg.level2_stride;
        let fa1 = self.conv2d_relu(tape, store, f, conv_name("shared.a", 1), 1)?;
        let fa2 = if self.ablation.uses_appearance() {
            Some(self.conv2d_relu(tape, store, fa1, conv_name("shared.a", 2), s2)?)
        } else {
            None
        };

        let (mut fi11, mut fi12, mut fi1, mut fi2) = (None, None, None, None);
        let mut rel_maps = None;
        if self.ablation.uses_relation() {
            let lifted_f = pt3d_var(tape, f, cfg.depth)?;
            let r11 = self.relation_block(tape, store, lifted_f, "rel.d1", 1)?;
            let lifted_a1 = pt3d_var(tape, fa1, cfg.depth)?;
            let r12 = self.relation_block(tape, store, lifted_a1, "rel.d2", 1)?;
            if tape.shape(r11) != tape.shape(r12) {
                return Err(Error::Config(format!(
                    "relation features disagree in shape: {:?} vs {:?}",
                    tape.shape(r11),
                    tape.shape(r12)
                )));
            }
            let r1 = tape.add(r11, r12)?;
            let r2 = self.relation_block(tape, store, r1, "rel.d3", s2)?;
            let flat1 = pt2d_var(tape, r1)?;
            let flat2 = pt2d_var(tape, r2)?;
            (fi11, fi12, fi1, fi2) = (Some(r11), Some(r12), Some(r1), Some(r2));
            rel_maps = Some((flat1, flat2));
        }

        let cat = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
            tape.concat(&[a, b], 1).map_err(|e| {
                Error::Config(format!("cannot concatenate appearance and relation maps: {e}"))
            })
        };
        let (fs1, fs2) = match (self.ablation.relation, rel_maps) {
            (RelationMode::Off, _) => (fa1, fa2.expect("appearance level 2")),
            (RelationMode::Only, Some((r1, r2))) => (r1, r2),
            (RelationMode::Fused, Some((r1, r2))) => {
                let fa2 = fa2.expect("appearance level 2");
                (cat(tape, fa1, r1)?, cat(tape, fa2, r2)?)
            }
            _ => unreachable!("relation maps exist whenever relation features are enabled"),
        };

        let parts = self.part_heads(tape, store, fs1, fs2)?;
        Ok(FeatureBundle {
            f,
            fa1,
            fa2,
            fi11,
            fi12,
            fi1,
            fi2,
            fs1,
            fs2,
            parts,
        })
    }

    /// Split each used level into row bands; per band GAP, embedding FC and
    /// identity classifier FC.
    pub fn part_heads(&self, tape: &mut Tape, store: &ParamStore, fs1: Var, fs2: Var) -> Result<Vec<PartOutput>> {
        let parts = self.num_parts();
        let mut out = Vec::new();
        for &level in self.ablation.levels() {
            let map = if level == 1 { fs1 } else { fs2 };
            let height = tape.shape(map)[2];
            for (k, (start, end)) in part_bands(height, parts)?.into_iter().enumerate() {
                let pooled = tape.band_avg_pool(map, start, end)?;
                let (wn, bn) = head_name(level, k + 1, "embed");
                let (w, b) = (self.param(tape, store, &wn)?, self.param(tape, store, &bn)?);
                let embedding = tape.fully_connected(pooled, w, b)?;
                tape.label(layer_of(&wn), embedding);
                let (wn, bn) = head_name(level, k + 1, "cls");
                let (w, b) = (self.param(tape, store, &wn)?, self.param(tape, store, &bn)?);
                let logits = tape.fully_connected(embedding, w, b)?;
                out.push(PartOutput {
                    level,
                    part: k + 1,
                    embedding,
                    logits,
                });
            }
        }
        Ok(out)
    }

    /// Full forward on a two-modality batch. Rows of every output are the RGB
    /// images followed by the IR images.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, rgb: &Tensor, ir: &Tensor) -> Result<FeatureBundle> {
        let mut stems = Vec::with_capacity(2);
        for (images, m) in [(rgb, Modality::Rgb), (ir, Modality::Ir)] {
            if images.shape()[0] == 0 {
                continue;
            }
            let x = tape.constant(images.clone());
            stems.push(self.forward_specific(tape, store, x, m)?);
        }
        let f = match stems.as_slice() {
            [one] => *one,
            _ => tape.concat(&stems, 0)?,
        };
        self.forward_shared(tape, store, f)
    }

    /// Inference descriptors for `[N, C, H, W]` images of one modality: the
    /// l2-normalized part embeddings, concatenated in slot order.
    pub fn describe(&self, store: &ParamStore, images: &Tensor, modality: Modality) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = self.forward_specific(&mut tape, store, x, modality)?;
        let bundle = self.forward_shared(&mut tape, store, f)?;
        let mut normed = Vec::with_capacity(bundle.parts.len());
        for p in &bundle.parts {
            normed.push(tape.l2_normalize(p.embedding, NORM_EPS)?);
        }
        let d = tape.concat(&normed, 1)?;
        Ok(tape.value(d).clone())
    }

    /// Data-dependent rescaling of the initial weights.
    ///
    /// Layer by layer in forward order, every convolution and embedding layer
    /// is rescaled so that its output channels have zero mean and unit
    /// variance over the calibration batch (all rows and positions). Without
    /// normalization layers, this keeps the pooled features from being
    /// dominated by a sample-independent offset. Classifiers are untouched.
    pub fn calibrate(&self, store: &mut ParamStore, rgb: &Tensor, ir: &Tensor) -> Result<()> {
        let layers: Vec<(String, ParamId, ParamId)> = store
            .iter()
            .filter_map(|(id, p)| {
                let layer = p.name.strip_suffix(".weight")?;
                if layer.ends_with(".cls") {
                    return None;
                }
                let bias = store.id(&format!("{layer}.bias"))?;
                Some((layer.to_string(), id, bias))
            })
            .collect();
        for (layer, w, b) in layers {
            let mut tape = Tape::new();
            self.forward(&mut tape, store, rgb, ir)?;
            let Some(out) = tape.labelled(&layer) else {
                continue;
            };
            let stats = channel_stats(tape.value(out));
            let fan: usize = store.value(w).shape()[1..].iter().product();
            for (o, (mean, std)) in stats.into_iter().enumerate() {
                if std < 1e-8 {
                    continue;
                }
                store.value_mut(w).data_mut()[o * fan..(o + 1) * fan]
                    .iter_mut()
                    .for_each(|v| *v /= std);
                let bias = &mut store.value_mut(b).data_mut()[o];
                *bias = (*bias - mean) / std;
            }
        }
        Ok(())
    }
}

/// Per-channel (axis 1) mean and standard deviation over every other axis.
fn channel_stats(t: &Tensor) -> Vec<(f64, f64)> {
    let s = t.shape();
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    (0..c)
        .map(|ch| {
            let vals = (0..n).flat_map(|i| {
                let start = (i * c + ch) * inner;
                t.data()[start..start + inner].iter().copied()
            });
            let (mut sum, mut sq, mut count) = (0.0, 0.0, 0.0);
            for v in vals {
                sum += v;
                sq += v * v;
                count += 1.0;
            }
            let mean = sum / count;
            (mean, (sq / count - mean * mean).max(0.0).sqrt())
        })
        .collect()
}
