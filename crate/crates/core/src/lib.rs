pub mod autodiff;
pub mod divergence;
pub mod experiment;
pub mod metrics;
pub mod nets;
pub mod oracle;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod validate;
