//! `avatar` command line and HTTP service.

pub mod commands;
pub mod error;
pub mod ops;
pub mod service;
