//! Simulation, rendering, data generation and learned long-term prediction
//! of a block sliding on an inclined plane, plus the classical baselines and
//! evaluation tooling around them.

pub mod baselines;
pub mod eval;
pub mod gradcheck;
pub mod oracle;
pub mod datagen;
pub mod models;
pub mod physics;
pub mod tensor;
pub mod render;
