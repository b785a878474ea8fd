//! Multi-modal video diffusion over rgb, depth, segmentation and edge videos:
//! one denoising transformer that generates any subset of modalities while
//! holding the rest clean as conditions.

pub mod checkpoint;
pub mod codec;
pub mod control;
pub mod metrics;
pub mod dataset;
pub mod modality;
pub mod model;
pub mod sampler;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use modality::Modality;
