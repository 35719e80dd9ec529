//! Cost evaluation, rate fitting, bound validation and the oscillation
//! example.

pub mod bounds;
pub mod cost;
pub mod oscillation;
pub mod rate;
pub mod validate;
