//! Parallel spatial indexes over integer point sets.
//!
//! Two index families share one exact query interface:
//!
//! * [`porth::OrthTree`] subdivides space into 2^D orthants per level. It is
//!   built and updated batch-wise by a counting sieve that moves points once
//!   per group of levels, and its final shape depends only on the stored
//!   point set, never on the order of operations.
//! * [`spac::SpacTree`] is a weight-balanced binary tree over
//!   space-filling-curve codes whose leaves hold small runs of points and
//!   may stay unsorted until an operation needs them ordered.
//!
//! Both answer exact k-nearest-neighbor and orthogonal range queries
//! ([`queries`]), are deterministic for any thread count, and come with a
//! workload harness ([`bench`]) and seeded data generators ([`datagen`]).

pub mod bench;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod sfc;
pub mod porth;
pub mod queries;
pub mod sieve;
pub mod spac;

pub use error::{Error, Result};
