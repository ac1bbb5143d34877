//! Distantly supervised relation extraction: piecewise convolutional
//! encoder, selective attention over bags, and adversarial regularizers at
//! the instance and bag levels.

pub mod attention;
pub mod bat;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod featurizer;
pub mod ivat;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use relext_autograd as autograd;
