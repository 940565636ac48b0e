//! Cascaded 2D-3D convolutional segmentation of multi-modal volumes.
//!
//! Three orientation-specific 2D networks (axial, coronal, sagittal) segment
//! every slice of a volume; their unnormalized class scores are restacked into
//! volumes and appended as extra input channels of a 3D patch network. The 3D
//! network therefore sees long-range in-plane context at every voxel of its
//! patch. Several such models are fused by a hierarchical per-voxel vote.
//!
//! Training uses a class-balanced cross-entropy whose per-voxel weights adapt
//! to the composition of each batch, and a momentum SGD variant that sums
//! gradients over several batches and normalizes the result to unit length
//! before scaling by a self-adjusting learning rate.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`], [`graph`]: tensors and reverse-mode autodiff for the
//!   layer primitives, with [`gradcheck`] for finite-difference validation.
//! * [`loss`]: batch-adaptive class weights and the combined loss.
//! * [`optim`]: the normalized-gradient optimizer and its schedule.
//! * [`arch`], [`model`]: declarative architectures and network construction.
//! * [`volume`], [`pipeline`], [`synth`]: data handling and synthetic phantoms.
//! * [`vote`], [`metrics`]: ensemble fusion and Dice evaluation.
//! * [`trainer`]: end-to-end training protocols.
//! * [`mvol`], [`config`]: on-disk formats.

pub mod arch;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod mvol;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume;
pub mod vote;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/loss.md")]
    mod loss {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    mod optimizer {}
    #[doc = include_str!("../../../book/src/architectures.md")]
    mod architectures {}
    #[doc = include_str!("../../../book/src/voting.md")]
    mod voting {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/mvol.md")]
    mod mvol {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
