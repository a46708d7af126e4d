//! On-disk formats: binary frame streams and enrollment documents.

pub mod enrollment;
pub mod stream;
