//! Library half of the `voxanon` binary.
//!
//! Every subcommand is an ordinary function over a resolved
//! [`voxanon_core::config::RunConfig`] and filesystem paths, so the
//! integration tests drive exactly the code the binary runs. See
//! [`commands`] for the command implementations and the artifact
//! file-name constants.

pub mod commands;
