//! Model files, image decoding, profiling, the CLI and the chat server
//! around [`imp_core`].

pub mod bench;
pub mod cli;
pub mod container;
pub mod image_io;
pub mod server;

pub use imp_core as core;
