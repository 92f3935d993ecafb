pub mod adamr;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod numkit;
pub mod pruners;
pub mod qsearch;
pub mod theory;

pub use error::{Error, Result};
