pub mod cli;
pub mod config;
pub mod error;
pub mod imgeo;
pub mod net;
pub mod params;
pub mod run;
pub mod synthdata;
pub mod tensor;
pub mod ughr;
pub mod uncertainty;
pub mod uoic;

pub use error::{Error, Result};
