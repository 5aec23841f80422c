//! Modal-based sparse control allocation for over-actuated LTI systems.
//!
//! The pipeline: reduce a stable plant by balanced truncation, transform the
//! reduced model to real modal form, and distribute a virtual (modal) control
//! demand across a redundant actuator set by solving an l1-regularized
//! weighted least-squares problem as a box-constrained QP. A pseudo-inverse
//! baseline, a closed-loop scenario engine with actuator-failure injection,
//! and Prony ringdown analysis round out the toolbox.

pub mod allocator;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod lti;
pub mod plot;
pub mod qp;
pub mod reduction;
pub mod ringdown;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
