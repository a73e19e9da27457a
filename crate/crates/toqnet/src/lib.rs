//! Relational-temporal quantification networks over entity trajectories:
//! a small tape autodiff engine, a finite-domain linear-temporal-logic
//! oracle, stacked relational and temporal quantification layers, a
//! formula-to-weights compiler, a synthetic trajectory generator, and a
//! training harness.

pub mod compiler;
pub mod logic;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
