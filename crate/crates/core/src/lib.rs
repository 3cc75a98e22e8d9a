pub mod alignment;
pub mod dataio;
pub mod encoding;
pub mod metrics;
pub mod model;
pub mod phonology;
pub mod training;
pub mod trimming;
