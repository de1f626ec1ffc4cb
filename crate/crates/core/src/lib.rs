pub mod cli;
pub mod config;
pub mod control;
pub mod deviation;
pub mod dynamics;
pub mod edmd;
pub mod error;
pub mod exec;
pub mod lifting;
pub mod linalg;
pub mod verify;

pub use error::{Error, Result};
