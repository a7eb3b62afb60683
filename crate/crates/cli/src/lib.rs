pub mod files;
pub mod service;
