//! Value-function learning with categorical cross-entropy targets.

pub mod agent;
pub mod cli;
pub mod env;
pub mod error;
pub mod eval;
pub mod net;
pub mod oracle;
pub mod projection;
pub mod replay;
pub mod support;

pub use error::{Error, Result};
