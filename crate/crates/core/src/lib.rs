//! Expression–morphology pipeline core: slide preprocessing, stain
//! normalisation, expression preparation, prediction aggregation and the
//! validation statistics used to evaluate predicted gene expression.

pub mod error;
pub mod expression;
pub mod lme;
pub mod numeric;
pub mod pipeline;
pub mod predict;
pub mod raster;
pub mod segmentation;
pub mod stain;
pub mod stats;
pub mod synth;
pub mod tiler;
pub mod tsv;

pub use error::{Error, Result};
