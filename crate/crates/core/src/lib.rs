pub mod tensor;
pub mod raster;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
