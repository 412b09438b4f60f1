pub mod captions;
pub mod corpus;
pub mod encode;
pub mod error;
pub mod evalx;
pub mod forest;
pub mod influence;
pub mod labeler;
pub mod pipeline;
pub mod simdedup;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
