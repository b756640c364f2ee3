pub mod error;
pub mod ftde;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod ref_frames;
pub mod skel_data;
pub mod tssn;

pub use error::{Error, Result};
