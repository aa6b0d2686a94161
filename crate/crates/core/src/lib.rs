//! Smooth rank-one approximation of Lipschitz maps sampled on grids.
//!
//! A map `f: Omega -> R^m` whose derivative has rank at most one factors
//! through a metric tree `Z_f`: `f = phi . psi`. This crate builds that
//! factorization on a grid, extracts a finite subtree `T`, embeds it with
//! mutually orthogonal edges in `R^E`, and assembles the smooth approximant
//! `f_eps = phi_eps . rho_eps . g_eps` together with a verification report.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod finite_tree;
pub mod grid;
pub mod io;
pub mod pipeline;
pub mod quadrature;
pub mod quasimetric;
pub mod quotient;
pub mod shortest_path;
pub mod smoothing;
mod union_find;

pub use error::{Error, Result};
