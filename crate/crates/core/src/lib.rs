//! Label-side machinery for unsupervised visible-infrared person
//! re-identification, operating on precomputed or synthetic embeddings.
//!
//! The crate is organised the way a training epoch consumes it:
//!
//! - [`embedding`]: embedding sets, file formats, cosine kernels
//! - [`clustering`]: per-modality DBSCAN and centroids
//! - [`memory_bank`]: momentum prototypes and InfoNCE losses
//! - [`association`]: bi-directional Sinkhorn label association
//! - [`fgsal`]: part splitting, instance-adaptive queries, query-guided attention
//! - [`gpcr`]: reliable positive mining and multi-positive instance losses
//! - [`cmfp`]: cross-modality feature propagation
//! - [`evaluation`]: CMC / mAP / mINP and clustering-quality indices
//! - [`synth`]: seeded two-modality embedding generator
//! - [`pipeline`]: one-epoch orchestration and a toy embedding optimizer

pub mod association;
pub mod clustering;
pub mod cmfp;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod fgsal;
pub mod gpcr;
mod linalg;
pub mod memory_bank;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
