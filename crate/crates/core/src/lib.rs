pub mod align;
pub mod cli;
pub mod config;
pub mod ctc;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod svg;
pub mod synth;
pub mod tensor;
pub mod trace;
pub mod train;
pub mod vocab;
