//! Differentiable operations. Each op computes its forward value eagerly
//! and registers a backward rule on the owning tape.

pub mod attention;
pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod loss;
pub mod norm;
pub mod shape;
