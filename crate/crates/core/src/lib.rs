pub mod cli;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod net;
pub mod observables;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod theory;
