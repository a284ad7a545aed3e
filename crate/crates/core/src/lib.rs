//! Desk-scale simulator for federated self-supervised learning.
//!
//! Two pretraining protocols are implemented on top of a small reverse-mode
//! autodiff engine:
//!
//! * **FedCLF**: MoCo-style contrastive learning on every client, with
//!   momentum-encoded features shared through the server as remote negatives.
//! * **FedMAE**: masked-autoencoder pretraining of a tiny ViT where the
//!   parameters are split into globally synchronized and client-local parts.
//!
//! Pretrained encoders are then fine-tuned with a fraction of the labels,
//! either per client or federated, and scored with the usual multiclass
//! metrics (balanced accuracy, macro precision/F1/specificity, one-vs-rest AUC).

pub mod config;
pub mod contrastive;
pub mod data;
pub mod digest;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod mae;
pub mod nets;
pub mod rng;
pub mod tensor;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use nets::params::{KnowledgeTag, ParamSet};
pub use tensor::{Tape, Tensor, Var};
