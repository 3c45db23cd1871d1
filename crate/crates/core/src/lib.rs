//! Necessary optimality conditions for optimal control problems written in a
//! single canonical form: an integral criterion maximized subject to a family
//! of τ-indexed integral constraints.
//!
//! The pipeline is: parse a problem file ([`format`]), build the canonical
//! problem ([`canonical`]), assemble the Lagrange function and its
//! Hamiltonian split ([`lagrange`]), solve numerically ([`solve`]), relax to
//! atomic controls when no ordinary optimum exists ([`relax`], [`chatter`]),
//! and check every condition on the result ([`verify`]).

pub mod candidate;
pub mod chatter;
pub mod canonical;
pub mod expr;
pub mod format;
pub mod lagrange;
pub mod relax;
pub mod solve;
pub mod report;
pub mod verify;
