use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
///
/// All 2D convolutions are 3x3 with padding 1; all 3D convolutions are
/// 3x3x3 with padding 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtmfeConfig {
    /// `(channels, height, width)` of input images.
    pub image_shape: [usize; 3],
    /// Output channels of the three modality-specific stages.
    pub specific_channels: [usize; 3],
    pub specific_strides: [usize; 3],
    /// Output channels of the two shared appearance stages.
    pub shared_channels: [usize; 2],
    /// Spatial stride of appearance block 2 and relation block 2.
    pub level2_stride: usize,
    /// Channels per group when lifting a 2D map into 3D.
    pub depth: usize,
    /// Channel budget `G * D` of each relation feature once flattened back to 2D.
    pub relation_channels: usize,
    pub num_parts: usize,
    pub num_identities: usize,
    pub embed_dim: usize,
}

impl Default for MtmfeConfig {
    fn default() -> Self {
        Self {
            image_shape: [3, 48, 24],
            specific_channels: [8, 16, 32],
            specific_strides: [1, 2, 2],
            shared_channels: [32, 32],
            level2_stride: 2,
            depth: 4,
            relation_channels: 16,
            num_parts: 6,
            num_identities: 20,
            embed_dim: 32,
        }
    }
}

/// How relation features enter the shared representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    /// Appearance features only.
    Off,
    /// Relation features only (no appearance channels in the output).
    Only,
    /// Appearance and relation features concatenated.
    Fused,
}

/// Structural switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    /// Use both feature levels (otherwise only the second).
    pub multi_level: bool,
    /// Split into `num_parts` row bands (otherwise one global band).
    pub parts: bool,
    pub relation: RelationMode,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            multi_level: true,
            parts: true,
            relation: RelationMode::Fused,
        }
    }
}

impl Ablation {
    pub fn levels(&self) -> &'static [usize] {
        if self.multi_level {
            &[1, 2]
        } else {
            &[2]
        }
    }

    pub fn uses_appearance(&self) -> bool {
        self.relation != RelationMode::Only
    }

    pub fn uses_relation(&self) -> bool {
        self.relation != RelationMode::Off
    }
}

/// Per-tensor shapes implied by a configuration (batch axis omitted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    /// `[C, H, W]` after each modality-specific stage; the last is `F`.
    pub specific: [[usize; 3]; 3],
    pub fa1: [usize; 3],
    pub fa2: [usize; 3],
    /// `[G, D, H, W]` of the level-1 and level-2 relation features.
    pub fi1: [usize; 4],
    pub fi2: [usize; 4],
    pub fs1: [usize; 3],
    pub fs2: [usize; 3],
}

pub(crate) fn conv_out(extent: usize, stride: usize) -> usize {
    // 3-wide kernel, padding 1
    (extent - 1) / stride + 1
}

impl MtmfeConfig {
    pub fn relation_groups(&self) -> usize {
        self.relation_channels / self.depth
    }

    pub fn parts_for(&self, ablation: &Ablation) -> usize {
        if ablation.parts {
            self.num_parts
        } else {
            1
        }
    }

    pub fn validate(&self, ablation: &Ablation) -> Result<ShapePlan> {
        let bad = |m: String| Err(Error::Config(m));
        let [c0, h0, w0] = self.image_shape;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return bad(format!("image_shape {:?} has a zero extent", self.image_shape));
        }
        if self.specific_channels.contains(&0) || self.shared_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.specific_strides.contains(&0) || self.level2_stride == 0 {
            return bad("strides must be at least 1".into());
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.num_parts == 0 || self.num_identities == 0 || self.embed_dim == 0 {
            return bad("num_parts, num_identities and embed_dim must be positive".into());
        }

        let mut specific = [[0; 3]; 3];
        let (mut h, mut w) = (h0, w0);
        for i in 0..3 {
            h = conv_out(h, self.specific_strides[i]);
            w = conv_out(w, self.specific_strides[i]);
            specific[i] = [self.specific_channels[i], h, w];
        }
        let f = specific[2];
        let fa1 = [self.shared_channels[0], f[1], f[2]];
        let (h2, w2) = (
            conv_out(fa1[1], self.level2_stride),
            conv_out(fa1[2], self.level2_stride),
        );
        let fa2 = [self.shared_channels[1], h2, w2];

        let g = self.relation_groups();
        let fi1 = [g, self.depth, f[1], f[2]];
        let fi2 = [g, self.depth, h2, w2];
        if ablation.uses_relation() {
            if f[0] % self.depth != 0 {
                return bad(format!(
                    "channels of F ({}) not divisible by depth {}",
                    f[0], self.depth
                ));
            }
            if !fa1[0].is_multiple_of(self.depth) {
                return bad(format!(
                    "channels of F_a1 ({}) not divisible by depth {}",
                    fa1[0], self.depth
                ));
            }
            if self.relation_channels == 0 || !self.relation_channels.is_multiple_of(self.depth) {
                return bad(format!(
                    "relation_channels {} must be a positive multiple of depth {}",
                    self.relation_channels, self.depth
                ));
            }
        }
        let rel = g * self.depth;
        let (fs1, fs2) = match ablation.relation {
            RelationMode::Off => (fa1, fa2),
            RelationMode::Only => ([rel, f[1], f[2]], [rel, h2, w2]),
            RelationMode::Fused => ([fa1[0] + rel, f[1], f[2]], [fa2[0] + rel, h2, w2]),
        };
        let parts = self.parts_for(ablation);
        for &level in ablation.levels() {
            let height = if level == 1 { fs1[1] } else { fs2[1] };
            if height < parts {
                return bad(format!(
                    "level-{level} feature height {height} is smaller than num_parts {parts}"
                ));
            }
        }
        Ok(ShapePlan {
            specific,
            fa1,
            fa2,
            fi1,
            fi2,
            fs1,
            fs2,
        })
    }
}

/// Row bands `[start, end)` splitting `height` rows into `parts` contiguous
/// bands; the first `height % parts` bands get one extra row.
pub fn part_bands(height: usize, parts: usize) -> Result<Vec<(usize, usize)>> {
    if parts == 0 || height < parts {
        return Err(Error::Config(format!(
            "cannot split height {height} into {parts} parts"
        )));
    }
    let base = height / parts;
    let extra = height % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|k| {
            let len = base + usize::from(k < extra);
            let band = (start, start + len);
            start += len;
            band
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_bands() {
        let b = part_bands(18, 6).unwrap();
        assert!(b.iter().all(|(s, e)| e - s == 3));
        assert_eq!(b.last().unwrap().1, 18);
    }

    #[test]
    fn uneven_bands_front_loaded() {
        let sizes: Vec<usize> = part_bands(20, 6).unwrap().iter().map(|(s, e)| e - s).collect();
        assert_eq!(sizes, vec![4, 4, 3, 3, 3, 3]);
    }

    #[test]
    fn too_short_for_parts() {
        assert!(part_bands(5, 6).is_err());
    }

    #[test]
    fn shape_calculus_reference_config() {
        // F is 32 x 12 x 6 with D = 4, G * D = 16, level-2 stride 2.
        let cfg = MtmfeConfig::default();
        let plan = cfg.validate(&Ablation::default()).unwrap();
        assert_eq!(plan.specific[2], [32, 12, 6]);
        assert_eq!(plan.fi1, [4, 4, 12, 6]);
        assert_eq!(plan.fs1, [32 + 16, 12, 6]);
        assert_eq!(plan.fs2, [32 + 16, 6, 3]);
    }

    #[test]
    fn indivisible_depth_rejected() {
        let cfg = MtmfeConfig {
            depth: 5,
            ..MtmfeConfig::default()
        };
        assert!(matches!(cfg.validate(&Ablation::default()), Err(Error::Config(_))));
    }

    #[test]
    fn level_height_below_parts_rejected() {
        let cfg = MtmfeConfig {
            image_shape: [3, 16, 8],
            ..MtmfeConfig::default()
        };
        // F is 4 rows high, level 2 is 2 rows
        assert!(cfg.validate(&Ablation::default()).is_err());
    }
}
