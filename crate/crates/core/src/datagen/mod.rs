//! Teaching-data generators.

pub mod track;
pub mod urban;
