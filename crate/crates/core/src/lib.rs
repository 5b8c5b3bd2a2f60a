//! Wide-area damping-control laboratory: multi-machine power-system dynamics,
//! stochastic measurement delays and a deterministic policy-gradient agent.

pub mod agent;
pub mod baselines;
pub mod delay;
pub mod env;
pub mod grid;
pub mod metrics;
pub mod train;
