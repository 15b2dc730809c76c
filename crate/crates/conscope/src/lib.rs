//! Command-line and HTTP front ends for `conscope-core`.

pub mod server;
pub mod table;
