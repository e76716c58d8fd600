pub mod baseline;
pub mod cli;
pub mod corpus;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod tasks;
pub mod training;
