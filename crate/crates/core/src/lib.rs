pub mod cli;
pub mod codec;
pub mod dataio;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod loss;
pub mod model;
pub mod nn;
pub mod synth;
pub mod trainer;
