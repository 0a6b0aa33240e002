pub mod error;
pub mod filter;
pub mod grid;
pub mod io;
pub mod lie;
pub mod metrics;
pub mod phantom;
pub mod register;
pub mod runspec;
pub mod synthesis;
pub mod transport;

pub use error::{Error, ErrorCategory, Result};
