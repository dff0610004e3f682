pub mod audit;
pub mod bench;
pub mod broker;
pub mod cli;
pub mod crypto;
pub mod durability;
pub mod error;
pub mod functions;
pub mod gatekeeper;
pub mod interceptor;
pub mod model;
pub mod registry;
pub mod service;
pub mod station;
pub mod storage;

pub use error::{Error, ErrorClass, Result};
