pub mod bundle;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod encoder;
pub mod eval;
pub mod index;
pub mod losses;
pub mod pooling;
pub mod scheduler;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod util;
