//! Paired-modality GLMs with a latent binary perturbation, fit by EM.

pub mod assignment;
pub mod design;
pub mod em;
pub mod error;
pub mod family;
pub mod glm;
pub mod io;
pub mod louis;
pub mod pipeline;
pub mod simulate;
pub mod zero_inflated;

pub use design::DesignMatrix;
pub use error::{Error, Result};
pub use family::Family;
