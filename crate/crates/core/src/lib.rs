//! Gated recurrence over attention keys/values composed with dilated, local,
//! sink and top-k sparse attention, plus the decode-time cache that serves it.

pub mod attention;
pub mod container;
pub mod error;
pub mod kv_cache;
pub mod numerics;
pub mod patterns;
pub mod recurrence;

pub use error::{Error, Result};
pub use numerics::{Array, RopeParams, Rng};
