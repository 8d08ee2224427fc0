pub mod encoder;
pub mod error;
pub mod geometry;
pub mod image;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod omniview;
pub mod pipeline;
pub mod renderer;
pub mod scenes;
pub mod selector;

pub use error::{Error, Result};
