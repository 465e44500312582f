//! Warm-start training experiments on small multilayer perceptrons.
//!
//! The crate contains a dense network with hand-written backpropagation
//! ([`nn`]), SGD and Adam ([`optim`]), the shrink-perturb
//! reinitialization ([`reinit`]), synthetic and CSV data ([`data`]),
//! experiment protocols ([`harness`]), analysis tools ([`diagnostics`])
//! and the `warmstart` command line ([`cli`]).

pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod output;
pub mod reinit;
pub mod seeds;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
