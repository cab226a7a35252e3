//! Synthetic two-modality identity data and identity-balanced batch sampling.

mod dataset;
mod sampler;

pub use dataset::{
    Dataset, ModalityTransform, Sample, SynthDatasetSpec, DATASET_MAGIC, DATASET_VERSION,
};
pub use sampler::{augment_flip, sample_batch, Batch};
pub(crate) use dataset::pick;
