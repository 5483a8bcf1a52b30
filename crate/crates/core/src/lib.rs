pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod tensor;
pub mod train;
