//! Run configuration and its flat `key = value` text form.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Lists
//! are comma separated. Unset keys keep their defaults; unknown keys are
//! rejected by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ModalityTransform, SynthDatasetSpec};
use crate::error::{Error, Result};
use crate::eval::{Direction, EvalOptions, GalleryMode};
use crate::losses::{LossConfig, MetricLoss, Reduction};
use crate::network::{Ablation, MtmfeConfig, RelationMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr_specific: f64,
    pub lr_shared: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    /// Global gradient-norm ceiling; 0 turns clipping off.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_specific: 0.01,
            lr_shared: 0.1,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_factor: 0.1,
            decay_every_epochs: 7,
            clip_norm: 0.0,
        }
    }
}

impl OptimConfig {
    /// `base * decay_factor ^ floor(epoch / decay_every_epochs)`.
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.decay_factor.powi((epoch / self.decay_every_epochs.max(1)) as i32)
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: MtmfeConfig,
    pub ablation: Ablation,
    pub loss: LossConfig,
    pub metric: MetricLoss,
    pub data: SynthDatasetSpec,
    /// Images per identity and modality used for training; the rest are held out for evaluation.
    pub train_per_identity: usize,
    pub optim: OptimConfig,
    pub batch_n: usize,
    pub batch_k: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub flip_prob: f64,
    pub seed: u64,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = MtmfeConfig::default();
        let data = SynthDatasetSpec::new(model.num_identities, 10, model.image_shape, 1);
        Self {
            model,
            ablation: Ablation::default(),
            loss: LossConfig::default(),
            metric: MetricLoss::Cq,
            data,
            train_per_identity: 6,
            optim: OptimConfig::default(),
            batch_n: 8,
            batch_k: 4,
            epochs: 15,
            batches_per_epoch: 50,
            flip_prob: 0.5,
            seed: 0,
            eval: EvalOptions::default(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::InvalidValue {
        key: key.into(),
        detail: format!("cannot parse `{v}`"),
    })
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn parse_array<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = parse_list(key, v)?;
    items.try_into().map_err(|items: Vec<usize>| Error::InvalidValue {
        key: key.into(),
        detail: format!("expected {N} values, got {}", items.len()),
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        o => Err(Error::InvalidValue {
            key: key.into(),
            detail: format!("expected a boolean, got `{o}`"),
        }),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parse `key = value` lines into a map, rejecting duplicates.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Apply one key. Unknown keys are an error naming the key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "image_shape" => {
                m.image_shape = parse_array(key, v)?;
                self.data.image_shape = m.image_shape;
            }
            "specific_channels" => m.specific_channels = parse_array(key, v)?,
            "specific_strides" => m.specific_strides = parse_array(key, v)?,
            "shared_channels" => m.shared_channels = parse_array(key, v)?,
            "level2_stride" => m.level2_stride = parse_num(key, v)?,
            "depth" => m.depth = parse_num(key, v)?,
            "relation_channels" => m.relation_channels = parse_num(key, v)?,
            "num_parts" => m.num_parts = parse_num(key, v)?,
            "num_identities" => {
                m.num_identities = parse_num(key, v)?;
                self.data.num_identities = m.num_identities;
            }
            "embed_dim" => m.embed_dim = parse_num(key, v)?,

            "use_multi_level" => self.ablation.multi_level = parse_bool(key, v)?,
            "use_parts" => self.ablation.parts = parse_bool(key, v)?,
            "relation" => {
                self.ablation.relation = match v {
                    "off" => RelationMode::Off,
                    "only" => RelationMode::Only,
                    "fused" => RelationMode::Fused,
                    o => {
                        return Err(Error::InvalidValue {
                            key: key.into(),
                            detail: format!("expected off|only|fused, got `{o}`"),
                        })
                    }
                }
            }
            "loss" => {
                self.metric = match v {
                    "cq" => MetricLoss::Cq,
                    "bdtr" => MetricLoss::Bdtr,
                    o => {
                        return Err(Error::InvalidValue {
                            key: key.into(),
                            detail: format!("expected cq|bdtr, got `{o}`"),
                        })
                    }
                }
            }

            "rho1" => self.loss.rho1 = parse_num(key, v)?,
            "rho2" => self.loss.rho2 = parse_num(key, v)?,
            "rho3" => self.loss.rho3 = parse_num(key, v)?,
            "normalize_inputs" => self.loss.normalize_inputs = parse_bool(key, v)?,
            "anchor_reduction" => {
                self.loss.anchor_reduction = match v {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    o => {
                        return Err(Error::InvalidValue {
                            key: key.into(),
                            detail: format!("expected sum|mean, got `{o}`"),
                        })
                    }
                }
            }

            "data_images_per_identity" => self.data.images_per_identity = parse_num(key, v)?,
            "data_latent_dim" => self.data.latent_dim = parse_num(key, v)?,
            "data_latent_jitter" => self.data.latent_jitter = parse_num(key, v)?,
            "data_seed" => self.data.seed = parse_num(key, v)?,
            "rgb_mix" => self.data.rgb.mix = parse_list(key, v)?,
            "rgb_bias" => self.data.rgb.bias = parse_list(key, v)?,
            "rgb_noise" => self.data.rgb.noise_sigma = parse_num(key, v)?,
            "ir_mix" => self.data.ir.mix = parse_list(key, v)?,
            "ir_bias" => self.data.ir.bias = parse_list(key, v)?,
            "ir_noise" => self.data.ir.noise_sigma = parse_num(key, v)?,
            "train_per_identity" => self.train_per_identity = parse_num(key, v)?,

            "lr_specific" => self.optim.lr_specific = parse_num(key, v)?,
            "lr_shared" => self.optim.lr_shared = parse_num(key, v)?,
            "momentum" => self.optim.momentum = parse_num(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "decay_factor" => self.optim.decay_factor = parse_num(key, v)?,
            "decay_every_epochs" => self.optim.decay_every_epochs = parse_num(key, v)?,
            "clip_norm" => self.optim.clip_norm = parse_num(key, v)?,

            "batch_n" => self.batch_n = parse_num(key, v)?,
            "batch_k" => self.batch_k = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batches_per_epoch" => self.batches_per_epoch = parse_num(key, v)?,
            "flip_prob" => self.flip_prob = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,

            "eval_mode" => self.eval.mode = GalleryMode::from_str(v)?,
            "eval_shots" => self.eval.shots = parse_num(key, v)?,
            "eval_redraws" => self.eval.redraws = parse_num(key, v)?,
            "eval_direction" => self.eval.direction = Direction::from_str(v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Defaults overridden by every key in `text`, then validated.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        // image shape and channel count must be settled before transforms are resized
        let kv = parse_kv(text)?;
        let explicit_transform = kv.keys().any(|k| k.starts_with("rgb_") || k.starts_with("ir_"));
        if let Some(v) = kv.get("image_shape") {
            cfg.set("image_shape", v)?;
            if !explicit_transform {
                let c = cfg.model.image_shape[0];
                cfg.data.rgb = ModalityTransform::identity(c, cfg.data.rgb.noise_sigma);
                cfg.data.ir = ModalityTransform::thermal(c, cfg.data.ir.noise_sigma);
            }
        }
        for (k, v) in &kv {
            if k != "image_shape" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_kv(&text)
    }

    /// Fully resolved configuration in the same text form.
    pub fn to_kv(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("image_shape", join(&m.image_shape));
        put("specific_channels", join(&m.specific_channels));
        put("specific_strides", join(&m.specific_strides));
        put("shared_channels", join(&m.shared_channels));
        put("level2_stride", m.level2_stride.to_string());
        put("depth", m.depth.to_string());
        put("relation_channels", m.relation_channels.to_string());
        put("num_parts", m.num_parts.to_string());
        put("num_identities", m.num_identities.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("use_multi_level", self.ablation.multi_level.to_string());
        put("use_parts", self.ablation.parts.to_string());
        put(
            "relation",
            match self.ablation.relation {
                RelationMode::Off => "off",
                RelationMode::Only => "only",
                RelationMode::Fused => "fused",
            }
            .into(),
        );
        put(
            "loss",
            match self.metric {
                MetricLoss::Cq => "cq",
                MetricLoss::Bdtr => "bdtr",
            }
            .into(),
        );
        put("rho1", self.loss.rho1.to_string());
        put("rho2", self.loss.rho2.to_string());
        put("rho3", self.loss.rho3.to_string());
        put("normalize_inputs", self.loss.normalize_inputs.to_string());
        put(
            "anchor_reduction",
            match self.loss.anchor_reduction {
                Reduction::Sum => "sum",
                Reduction::Mean => "mean",
            }
            .into(),
        );
        put("data_images_per_identity", self.data.images_per_identity.to_string());
        put("data_latent_dim", self.data.latent_dim.to_string());
        put("data_latent_jitter", self.data.latent_jitter.to_string());
        put("data_seed", self.data.seed.to_string());
        put("rgb_mix", join(&self.data.rgb.mix));
        put("rgb_bias", join(&self.data.rgb.bias));
        put("rgb_noise", self.data.rgb.noise_sigma.to_string());
        put("ir_mix", join(&self.data.ir.mix));
        put("ir_bias", join(&self.data.ir.bias));
        put("ir_noise", self.data.ir.noise_sigma.to_string());
        put("train_per_identity", self.train_per_identity.to_string());
        put("lr_specific", self.optim.lr_specific.to_string());
        put("lr_shared", self.optim.lr_shared.to_string());
        put("momentum", self.optim.momentum.to_string());
        put("weight_decay", self.optim.weight_decay.to_string());
        put("decay_factor", self.optim.decay_factor.to_string());
        put("decay_every_epochs", self.optim.decay_every_epochs.to_string());
        put("clip_norm", self.optim.clip_norm.to_string());
        put("batch_n", self.batch_n.to_string());
        put("batch_k", self.batch_k.to_string());
        put("epochs", self.epochs.to_string());
        put("batches_per_epoch", self.batches_per_epoch.to_string());
        put("flip_prob", self.flip_prob.to_string());
        put("seed", self.seed.to_string());
        put(
            "eval_mode",
            match self.eval.mode {
                GalleryMode::SingleShot => "single",
                GalleryMode::MultiShot => "multi",
            }
            .into(),
        );
        put("eval_shots", self.eval.shots.to_string());
        put("eval_redraws", self.eval.redraws.to_string());
        put(
            "eval_direction",
            match self.eval.direction {
                Direction::Ir2Rgb => "ir2rgb",
                Direction::Rgb2Ir => "rgb2ir",
            }
            .into(),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |key: &str, detail: String| {
            Err(Error::InvalidValue {
                key: key.into(),
                detail,
            })
        };
        for (k, v) in [("lr_specific", self.optim.lr_specific), ("lr_shared", self.optim.lr_shared)] {
            if !(v > 0.0) || !v.is_finite() {
                return invalid(k, format!("learning rate must be > 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return invalid("momentum", format!("must lie in [0, 1), got {}", self.optim.momentum));
        }
        if self.optim.weight_decay < 0.0 {
            return invalid("weight_decay", "must be >= 0".into());
        }
        if !(self.optim.decay_factor > 0.0) {
            return invalid("decay_factor", "must be > 0".into());
        }
        if !(self.optim.clip_norm >= 0.0) || !self.optim.clip_norm.is_finite() {
            return invalid("clip_norm", "must be a finite value >= 0".into());
        }
        if self.optim.decay_every_epochs == 0 {
            return invalid("decay_every_epochs", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return invalid("flip_prob", format!("must lie in [0, 1], got {}", self.flip_prob));
        }
        if self.batch_n < 2 || self.batch_k < 2 {
            return invalid(
                "batch_k",
                format!(
                    "batches need N >= 2 identities and K >= 2 images (N={}, K={})",
                    self.batch_n, self.batch_k
                ),
            );
        }
        if self.batch_n > self.data.num_identities {
            return invalid(
                "batch_n",
                format!("{} exceeds {} identities", self.batch_n, self.data.num_identities),
            );
        }
        if self.train_per_identity < self.batch_k
            || self.train_per_identity >= self.data.images_per_identity
        {
            return invalid(
                "train_per_identity",
                format!(
                    "must be in [batch_k, data_images_per_identity) = [{}, {})",
                    self.batch_k, self.data.images_per_identity
                ),
            );
        }
        if self.model.image_shape != self.data.image_shape
            || self.model.num_identities != self.data.num_identities
        {
            return Err(Error::Config("model and data disagree on image shape or identity count".into()));
        }
        self.loss.validate()?;
        self.data.validate()?;
        self.model.validate(&self.ablation)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_optimizer_settings() {
        let c = RunConfig::from_kv("").unwrap();
        assert_eq!(c.optim.lr_specific, 0.01);
        assert_eq!(c.optim.lr_shared, 0.1);
        assert_eq!(c.optim.weight_decay, 0.0005);
        assert_eq!(c.optim.decay_factor, 0.1);
        assert_eq!(c.optim.decay_every_epochs, 7);
        assert_eq!((c.batch_n, c.batch_k), (8, 4));
    }

    #[test]
    fn unknown_key_named() {
        match RunConfig::from_kv("epochs = 3\nlearning_rate = 0.1\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("expected unknown key, got {other:?}"),
        }
    }

    #[test]
    fn resolved_text_round_trips() {
        let c = RunConfig::from_kv("image_shape = 1,24,12\nspecific_strides = 2,1,1\nrelation = only\nloss = bdtr\n# note\nseed = 9").unwrap();
        let again = RunConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(again, c);
        assert_eq!(c.data.ir.mix.len(), 1);
    }

    #[test]
    fn lr_schedule() {
        let o = OptimConfig::default();
        assert_eq!(o.lr_at(0.1, 0), 0.1);
        assert_eq!(o.lr_at(0.1, 6), 0.1);
        assert!((o.lr_at(0.1, 7) - 0.01).abs() < 1e-15);
        assert!((o.lr_at(0.1, 14) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn non_positive_lr_rejected() {
        assert!(matches!(
            RunConfig::from_kv("lr_shared = 0"),
            Err(Error::InvalidValue { key, .. }) if key == "lr_shared"
        ));
    }
}
