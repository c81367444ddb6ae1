//! Collective matrix tri-factorization of heterogeneous relational
//! collections, with discordance analysis between input and reconstruction.

pub mod discordance;
pub mod error;
pub mod eval;
pub mod ndiff;
pub mod multiway;
pub mod networks;
pub mod schema;
pub mod trainer;

pub use error::{Error, Result};
