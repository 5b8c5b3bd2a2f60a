use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Shunt fault admittance (pu) at a bus.
    BusFault,
    /// Removes the fault at a bus.
    FaultClear,
    /// Opens a branch; `target` is the line index in the case.
    LineTrip,
    /// Adds `magnitude` MW of constant-impedance load at a bus.
    LoadStep,
    /// Sets the output (MW) of the PV unit at bus `target`.
    PvSet,
}

/// A scheduled network disturbance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridEvent {
    pub kind: EventKind,
    pub target: u32,
    pub time: f64,
    #[serde(default)]
    pub magnitude: f64,
}

impl GridEvent {
    pub fn bus_fault(bus: u32, time: f64, admittance: f64) -> Self {
        Self {
            kind: EventKind::BusFault,
            target: bus,
            time,
            magnitude: admittance,
        }
    }

    pub fn fault_clear(bus: u32, time: f64) -> Self {
        Self {
            kind: EventKind::FaultClear,
            target: bus,
            time,
            magnitude: 0.0,
        }
    }

    pub fn line_trip(line: u32, time: f64) -> Self {
        Self {
            kind: EventKind::LineTrip,
            target: line,
            time,
            magnitude: 0.0,
        }
    }
}
