//! HTTP API and command-line front ends over the session store.

pub mod api;
pub mod cli;
