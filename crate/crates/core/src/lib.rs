pub mod encoder;
pub mod error;
pub mod numcore;
pub mod rope;
pub mod synthdata;
pub mod tokenizer;
pub mod windowattn;

pub use error::{Error, Result};
