//! Desk-scale laboratory for representation-consistency fine-tuning.
//!
//! * [`matrix`]: dense symmetric eigensolver, pseudo-inverse, projectors.
//! * [`net`]: small tanh/relu encoder with a linear head and exact backprop.
//! * [`regularize`]: CAPCORT-I, CAPCORT-MLP and the baseline regularizers.
//! * [`collapse`]: Gram spectra and the GM-k / HM-k diversity metrics.
//! * [`oracle`]: numerical checks of the pseudo multi-task reduction.
//! * [`data`], [`train`], [`harness`]: synthetic tasks, fine-tuning, sweeps.
//! * [`config`], [`cli`]: JSON run configuration and the `rcl` command line.

pub mod error;
pub mod matrix;
pub mod net;
pub mod regularize;
pub mod collapse;
pub mod oracle;
pub mod data;
pub mod train;
pub mod harness;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
