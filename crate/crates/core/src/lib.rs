//! De-raining toolkit: a multi-scale residual + confidence network with a
//! confidence-guided training loss, a generic cycle-spinning inference
//! wrapper, synthetic rain-streak generation, and PSNR/SSIM evaluation.

pub mod imaging;
pub mod nn;
