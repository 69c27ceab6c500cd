//! Single-image reflection removal.
//!
//! A reflection network and a target network (both UNets) are trained
//! jointly with a multi-step loss that feeds each predicted target back in as
//! the next input. A quantized ("ranged") depth map of the ambient image is
//! supplied as a fixed auxiliary channel. A pix2pix-style generator
//! synthesizes extra training pairs, and an evaluation bench reports PSNR,
//! SSIM and optionally LPIPS.

pub mod datasets;
pub mod depthrange;
pub mod error;
pub mod evalbench;
pub mod imagecore;
pub mod losses;
pub mod networks;
pub mod refgan;
pub mod trainer;

pub use error::{Error, Result};
