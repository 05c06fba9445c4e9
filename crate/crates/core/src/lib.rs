pub mod cli;
pub mod clinic;
pub mod clues;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod raster;
pub mod tensor;
pub mod text;
pub mod trainer;
