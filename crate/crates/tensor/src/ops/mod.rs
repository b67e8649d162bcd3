mod conv;
mod elementwise;
mod linalg;
mod nn;
mod reduce;
mod shape;

pub use conv::{pixel_shuffle_tensor, pixel_unshuffle_tensor, Conv2dSpec};
