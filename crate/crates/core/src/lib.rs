//! Neural-network optimal feedback controllers with LQR structure, trained on
//! Pontryagin boundary-value data and checked with closed-loop stability,
//! suboptimality and ultimate-boundedness tests.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod bvp;
pub mod dataset;
pub mod dynamics;
pub mod eval;
pub mod linalg;
pub mod lqr;
pub mod models;
pub mod ode;
pub mod pipeline;
pub mod report;
pub mod training;
