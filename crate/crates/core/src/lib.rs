//! Cardiac cine MRI motion estimation with implicit neural representations.

pub mod align;
pub mod dataset;
pub mod edt;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mha;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod registration;
pub mod report;
pub mod siren;
pub mod stats;
pub mod strain;
pub mod upsample;
pub mod volume;

pub use error::{Error, Result};
