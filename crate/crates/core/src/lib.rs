//! Attention-based twin-delayed actor-critic modelling of car-following behaviour.
//!
//! The numerical core ([`numerics`], [`nets`], [`agent`]) is generic over the
//! scalar type; the aliases below fix it to `f64`, which is what training and
//! evaluation use.

pub mod numerics;

pub type Real = f64;
pub type Matrix = numerics::Matrix<Real>;
pub type Graph = numerics::Graph<Real>;
pub mod env;
pub mod nets;
pub mod eval;
pub mod agent;
pub mod baselines;
pub mod data;
