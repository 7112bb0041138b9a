//! Turnstile sketches for lp heavy hitters, lp leverage-score sampling and
//! coresets for lp, ReLU, logistic and probit regression.

pub mod conditioning;
pub mod coreset;
pub mod error;
pub mod hashing;
pub mod experiment;
pub mod heavy_hitters;
pub mod ingest;
pub mod loss;
pub mod numeric;
pub mod params;
pub mod sampler;
pub mod solver;
pub mod special;
pub mod stream;
pub mod synth;

pub use error::{Error, Result};
pub use hashing::SeedSet;
pub use heavy_hitters::{HeavyList, SketchConfig, SketchState};
pub use stream::{StreamHeader, TurnstileUpdate};
