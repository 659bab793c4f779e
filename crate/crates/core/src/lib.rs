//! Chaotic-map contrastive pre-training, supervised fine-tuning and
//! attention-based feature fusion, built on a small reverse-mode autodiff
//! engine in double precision.
//!
//! The three training stages are:
//!
//! 1. [`ssl::pretrain`]: SimCLR-style contrastive learning where the second
//!    view of every image is pushed through a pixel-wise chaotic map
//!    ([`chaos::chaotic_transform`]).
//! 2. [`finetune::finetune`]: encoder plus linear head trained with
//!    cross-entropy under a cosine-annealed learning rate.
//! 3. [`fusion::train_fusion`]: two fine-tuned backbones concatenated,
//!    re-weighted by a squeeze-and-excite gate and classified.
//!
//! [`harness`] ties them together on a synthetic fine-grained texture dataset.

pub mod augment;
pub mod chaos;
pub mod error;
pub mod finetune;
pub mod fusion;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod seeding;
pub mod ssl;
pub mod tensor;

pub use error::{Error, Result, Stage};
