//! Core of a metadata-driven, evolvable data warehouse: a leveled data
//! highway fed by source wrappers, metadata-defined ELT ending in a star
//! schema, a cuboid engine, and a change adaptation workflow.

pub mod adaptation;
pub mod cube;
pub mod engine;
pub mod error;
pub mod highway;
pub mod ingestion;
pub mod metastore;
pub mod storage;
pub mod value;

pub use error::{Error, Result};
pub use value::{Value, ValueType};
