//! File formats, command-line tools and the HTTP session API around
//! `dragnoise-core`.

pub mod checkpoint;
pub mod cli;
pub mod edit;
pub mod image_io;
pub mod server;
