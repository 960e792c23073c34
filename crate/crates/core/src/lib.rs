//! Conditional GAN training under federated averaging.
//!
//! The crate is organised by concern:
//!
//! * [`autodiff`]: reverse-mode differentiation, including gradients that can
//!   be differentiated again (needed by the WGAN-GP penalty).
//! * [`models`]: generator, CNN and ViT discriminators, classifiers, and the
//!   flat [`models::ParamVector`] used for checkpoints and federation.
//! * [`gan`]: CGAN, ACGAN and WGAN-GP objectives, Adam, the training loop.
//! * [`federation`]: FedAvg rounds, client sampling, IID / non-IID partitions.
//! * [`transport`]: the binary wire protocol, aggregation server and client.
//! * [`data`]: image directories, the procedural texture corpus, augmentation.
//! * [`metrics`]: FID, classification harness, memorization and diversity audits.

pub mod autodiff;
pub mod data;
pub mod federation;
pub mod gan;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod transport;
