//! Scenario runner, event log and console endpoint.

pub mod config;
pub mod kernel;
pub mod log;
pub mod protocol;
pub mod run;
pub mod scenario;
pub mod server;

use std::io;

use thiserror::Error;

pub use config::SimConfig;
pub use kernel::Kernel;
pub use log::EventRecord;
pub use scenario::{ParseError, Scenario};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("scenario: {0}")]
    Parse(#[from] ParseError),
    #[error("config: {0}")]
    Config(String),
    #[error("world: {0}")]
    World(#[from] crate::world::WorldError),
    #[error("message bus: {0}")]
    Mas(#[from] crate::mas::MasError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("corrupt log: {0}")]
    LogCorrupt(String),
    #[error("cannot bind: {0}")]
    Bind(#[source] io::Error),
}
