pub mod audit;
pub mod bilinear;
pub mod codec;
pub mod exec;
pub mod field;
pub mod quant;
pub mod seed;
pub mod stats;
pub mod trainer;
pub mod workers;
