//! Single-shot target augmentation for source-free domain adaptation.
//!
//! One unlabeled target image steers a pretrained style-based generator toward
//! the target domain. The generator is then sampled with activation pruning to
//! build a synthetic target set, and a source classifier is adapted on that set
//! without source data. All models and tensors are generic over [`Scalar`]
//! (`f32` or `f64`).

pub mod adapt;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod inversion;
pub mod nn;
pub mod pipeline;
pub mod pretrain;
pub mod sampler;
pub mod scalar;
pub mod shapes;
pub mod shiftlab;
pub mod stylegen;

pub use adapt::{AdaptState, ClassifierHandle, NRCConfig};
pub use error::{Error, Result};
pub use finetune::{FinetuneConfig, FinetuneReport};
pub use inversion::{InversionConfig, InversionResult};
pub use pipeline::{ExperimentConfig, ResultTable};
pub use sampler::{PruneConfig, Strategy, SyntheticManifest};
pub use scalar::Scalar;
pub use shiftlab::ShiftConfig;
pub use stylegen::{Discriminator, ExtendedLatent, Generator, Image, StyleLayerSet};

pub type Generator32 = Generator<f32>;
pub type Generator64 = Generator<f64>;
pub type Discriminator32 = Discriminator<f32>;
pub type Discriminator64 = Discriminator<f64>;
pub type Classifier32 = ClassifierHandle<f32>;
pub type Classifier64 = ClassifierHandle<f64>;
pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
