//! Policy optimization for zero-sum linear-quadratic dynamic games.
//!
//! The Nash equilibrium of a discrete-time zero-sum LQ game is computed two
//! ways: from the generalized algebraic Riccati equation ([`game`]) and by
//! projected nested-gradient policy optimization ([`inner_loop`],
//! [`outer_loop`]). Alternating and simultaneous gradient baselines live in
//! [`baselines`], sampled-data (zeroth-order) variants in [`modelfree`], and
//! the experiment harness behind the `lqgame` CLI in [`experiments`].

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod experiments;
pub mod game;
pub mod inner_loop;
pub mod linalg;
pub mod modelfree;
pub mod outer_loop;
pub mod plot;
pub mod policy;
pub mod trace;

pub use error::{Error, Result};
pub use game::{case1, case2, AssumptionReport, LqGame, NashSolution};
pub use linalg::{Mat, SymMat};
pub use policy::{PolicyEval, PolicyPair};
