pub mod nn;
pub mod rng;
pub mod tensor;
