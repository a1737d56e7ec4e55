//! Reference-conditioned latent diffusion for portrait animation.

pub mod animate;
pub mod audit;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod context;
pub mod datapipe;
mod error;
pub mod frame;
pub mod layers;
pub mod model;
pub mod motion;
pub mod params;
pub mod refnet;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
