//! Command line tools and the HTTP render service.

pub mod app;
pub mod service;
