//! Volumetric microscopy restoration toolkit.
//!
//! The crate pairs two classic frequency-domain deconvolution baselines
//! (Wiener filtering and Richardson-Lucy iteration) with a small learned
//! network that embeds the Richardson-Lucy update into a convolutional
//! encoder-decoder. Supporting modules provide synthetic bead/sphere/shell
//! phantoms with controlled blur and noise, SSIM/PSNR evaluation, a
//! reverse-mode tape for training, and file formats for volumes,
//! checkpoints and reports.

pub mod classic;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod model;
pub mod simulate;
pub mod train;
pub mod volgrid;

pub use error::{Error, Result};
