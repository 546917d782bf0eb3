pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokens;
pub mod training;
