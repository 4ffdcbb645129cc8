//! Exactly verifiable bilevel policy alignment on tabular MDPs.
//!
//! The lower level optimizes a softmax policy against a parameterized linear
//! reward; the upper level adjusts the reward parameters to maximize an
//! alignment objective (a trajectory utility, or the log-likelihood of
//! pairwise preferences from a simulated teacher) whose data distribution
//! depends on the lower-level optimum. The upper gradient is assembled
//! through the implicit function theorem from exact enumerated Hessians and
//! mixed Jacobians, and every analytic quantity is checkable against
//! brute-force finite-difference oracles shipped in [`verify`].
//!
//! Desk scale is the point: state spaces are small enough that trajectory
//! distributions enumerate exactly, so gradient identities hold to
//! round-off rather than to sampling noise.
//!
//! See the `book/` directory for a guided tour with runnable examples.

pub mod driver;
pub mod envs;
pub mod error;
pub mod hypergrad;
pub mod lower;
pub mod mdp;
pub mod policy;
pub mod reward;
pub mod rng;
pub mod verify;

mod book;

pub use error::{Error, Result};
