//! The cross-modality feature extractor.
//!
//! Images of each modality pass through their own three-stage convolutional
//! stem to give `F`. From there every layer is shared between modalities:
//!
//! * appearance: `F_a1 = conv(F)`, `F_a2 = conv(F_a1)` (the second strided);
//! * relation: `F_I11 = conv3d(pt3d(F))`, `F_I12 = conv3d(pt3d(F_a1))`,
//!   `F_I1 = F_I11 + F_I12`, `F_I2 = conv3d(F_I1)` (strided in H and W);
//! * fusion: `F_s1 = [F_a1 ; pt2d(F_I1)]`, `F_s2 = [F_a2 ; pt2d(F_I2)]`;
//! * heads: each `F_s` is cut into horizontal bands, pooled, embedded and
//!   classified per band.

pub mod checkpoint;
mod config;
mod model;
mod projection;

pub use config::{part_bands, Ablation, MtmfeConfig, RelationMode, ShapePlan};
pub use model::{FeatureBundle, Mtmfe, PartOutput};
pub use projection::{channel_slot, pt2d, pt2d_var, pt3d, pt3d_var};
