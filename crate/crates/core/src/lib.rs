//! Core of a data delivery service: a directed-graph workflow model, a
//! durable entity store with leases, the five processing daemons, pluggable
//! (simulated) workload and data management backends, and the data
//! carousel, hyperparameter optimisation and job-graph use cases built on them.

pub mod backends;
pub mod carousel;
pub mod clock;
pub mod dag;
pub mod hpo;
pub mod ids;
pub mod model;
pub mod pipeline;
pub mod store;
pub mod sweep;
pub mod wire;
