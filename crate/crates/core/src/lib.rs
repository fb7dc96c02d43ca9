pub mod client;
pub mod config;
pub mod crypto;
pub mod enclave;
pub mod field;
pub mod harness;
pub mod id;
pub mod masking;
pub mod protocol;
pub mod server;
pub mod transport;
pub mod workload;
