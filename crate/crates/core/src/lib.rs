pub mod tensor;
pub mod dsp;
pub mod ingest;
pub mod dataset;
pub mod seed;
pub mod model;
pub mod synth;
pub mod train;
pub mod gradsuite;
