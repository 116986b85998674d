pub mod audio;
pub mod binfmt;
pub mod blending;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod fts;
pub mod latents;
pub mod nn;
pub mod sfen;
pub mod synthetic;
pub mod training;
pub mod tts;
pub mod vocoder;

pub use error::{Error, Result};
