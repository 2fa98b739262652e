//! Caption scoring by fixed-concentration vMF mixture divergence.
//!
//! Image patches and caption tokens are each summarized by a mixture of von
//! Mises–Fisher components sharing one concentration. The two mixtures are
//! compared with Monte-Carlo KL in both directions, blended by caption
//! length, and used to correct the cosine similarity of pooled embeddings
//! (MSD). Soft-MSD scales the correction by how ambiguous the cosine ranking
//! of the candidate captions is.

// Range checks are written `!(x > lo)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod io;
pub mod scoring;
pub mod sphere;
pub mod synth;
pub mod vmf;

pub use config::{PipelineConfig, Profile};
pub use divergence::{bi_kl, mc_kl, BetaConfig, DivergenceReport};
pub use error::{MsdError, Result};
pub use scoring::{msd_score, soft_msd_batch, FusionConfig, ScoreRecord};
pub use sphere::{EmbeddingSet, Modality, RngState, UnitVector};
pub use vmf::{em_fit, EmConfig, VmfMixture};
