//! Minimal reverse-mode automatic differentiation over dense `f64`
//! matrices, with the fused attention, convolution and resampling kernels
//! the segmentation model needs.

mod attention;
mod conv;
pub mod gradcheck;
mod loss;
mod ops;
mod tape;

pub use attention::{attention_probs, AttnBlock};
pub use conv::{bilinear_sample, resize_bilinear, Grid};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use tape::{Gradients, Mat, Tape, Var};
