pub mod midi;
pub mod tokenizer;
pub mod metrics;
pub mod pairing;
pub mod nn;
pub mod model;
pub mod training;
pub mod synth;
pub mod config;
pub mod run;
pub mod ablation;
