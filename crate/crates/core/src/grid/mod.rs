//! Steady-state initialization and electromechanical time-domain simulation.
//!
//! The network is algebraic (phasor) and loads are constant admittances, so
//! between events the machines see a fixed Kron-reduced admittance among their
//! internal EMF nodes. Each machine is a one-axis flux-decay model with a
//! first-order static exciter; the network sees the EMF behind `Xd'`.

mod case;
mod dynamics;
mod event;
mod network;
mod powerflow;
mod ybus;

use thiserror::Error;

pub use case::{Bus, BusKind, Generator, GridCase, Line, PvUnit};
pub use dynamics::{
    derivatives, electrical_power, init_dynamic_state, rk4_step, simulate, step_rk4, DynamicState,
    MachineParams, StateDerivative,
};
pub use event::{EventKind, GridEvent};
pub use network::{kron_reduce, GeneratorBranch, Network, ReducedNetwork};
pub use powerflow::{solve_power_flow, PowerFlowOptions, PowerFlowSolution};
pub use ybus::build_admittance;

pub type C64 = num_complex::Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("duplicate bus id {0}")]
    DuplicateBus(u32),
    #[error("unknown bus {bus} referenced by {context}")]
    UnknownBus { bus: u32, context: String },
    #[error("unknown event target {0}")]
    UnknownTarget(u32),
    #[error("invalid case: {0}")]
    Invalid(String),
    #[error("case schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("power flow did not converge in {iterations} iterations (mismatch {mismatch:.3e} pu)")]
    NotConverged { iterations: usize, mismatch: f64 },
    #[error("singular Jacobian at iteration {0}")]
    SingularJacobian(usize),
    #[error("singular network reduction: {0}")]
    SingularReduction(String),
    #[error("generator {gen} needs field voltage {efd:.3} pu outside [{min}, {max}]")]
    FieldLimit {
        gen: usize,
        efd: f64,
        min: f64,
        max: f64,
    },
    #[error("non-finite state at t = {t:.4} s")]
    NonFinite { t: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}
