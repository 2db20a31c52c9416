//! Split-learning fine-tuning simulator for a miniature causal language model,
//! together with the data-reconstruction attacks a curious server can mount on
//! what it observes, the perturbation defenses a client can apply, and the
//! text metrics used to score reconstructions.

pub mod attacks;
pub mod autodiff;
pub mod defenses;
mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod par;
pub mod rng;
pub mod splitsim;

pub use error::{Error, Result};
