//! Learning-to-rank retrieval of physical objects from open-vocabulary
//! instructions.
//!
//! The crate covers the offline half of the system: the dataset model
//! ([`corpus`]), phrase extraction ([`phrases`]), frozen backbone features
//! ([`backbone`]), the ranking network and its training ([`ranker`],
//! [`train`]) and ranking metrics ([`metrics`]).

pub mod backbone;
pub mod corpus;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod phrases;
pub mod ranker;
pub mod train;

pub use error::{Error, ErrorClass, Result};
