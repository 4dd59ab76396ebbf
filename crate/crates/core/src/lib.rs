pub mod calibration;
pub mod coupling;
pub mod dataset;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod optim;
pub mod renderer;
pub mod synth;
pub mod trainer;
