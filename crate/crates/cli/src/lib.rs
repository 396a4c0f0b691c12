//! Library half of the `kvrag` binary, shared with its integration tests.

pub mod commands;
pub mod report;
pub mod verify;
