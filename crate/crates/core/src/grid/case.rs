//! Static network description: buses, branches, machines and PV plants.
//!
//! Quantities follow the units of the JSON case files: powers in MW/MVAr,
//! branch impedances in pu on `system_base`, machine reactances and inertia on
//! the machine's own MVA rating.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::GridError;

const KUNDUR_JSON: &str = include_str!("../../data/kundur_2area.json");
const IEEE39_JSON: &str = include_str!("../../data/ieee39.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    #[serde(rename = "PV", alias = "pv")]
    Pv,
    #[serde(rename = "PQ", alias = "pq")]
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub kind: BusKind,
    #[serde(rename = "V_setpoint", default = "one")]
    pub v_setpoint: f64,
    #[serde(rename = "P_load", default)]
    pub p_load: f64,
    #[serde(rename = "Q_load", default)]
    pub q_load: f64,
    /// Control area used for tie-line metering and PV re-dispatch.
    #[serde(default = "default_area")]
    pub area: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: u32,
    pub to_bus: u32,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_shunt: f64,
    #[serde(default = "yes")]
    pub in_service: bool,
    /// Fixed off-nominal turns ratio on the `from` side (1.0 for lines).
    #[serde(default = "one")]
    pub tap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub bus: u32,
    /// MVA base of the machine parameters below.
    pub rating: f64,
    #[serde(rename = "H")]
    pub h: f64,
    #[serde(rename = "D", default)]
    pub d: f64,
    #[serde(rename = "Xd")]
    pub xd: f64,
    #[serde(rename = "Xd_prime")]
    pub xd_prime: f64,
    #[serde(rename = "Td0_prime")]
    pub td0_prime: f64,
    #[serde(rename = "Ka")]
    pub ka: f64,
    #[serde(rename = "Ta")]
    pub ta: f64,
    #[serde(rename = "Efd_min")]
    pub efd_min: f64,
    #[serde(rename = "Efd_max")]
    pub efd_max: f64,
    /// Scheduled output in MW; ignored for the slack machine.
    #[serde(rename = "P_dispatch")]
    pub p_dispatch: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvUnit {
    pub bus: u32,
    pub rated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCase {
    #[serde(default)]
    pub name: String,
    pub system_base: f64,
    pub nominal_freq: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub pv_units: Vec<PvUnit>,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_area() -> u32 {
    1
}

impl GridCase {
    /// Parses a case from JSON; type and missing-field errors carry the field path.
    pub fn from_json_str(text: &str) -> Result<Self, GridError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let case: GridCase =
            serde_path_to_error::deserialize(de).map_err(|e| GridError::Schema {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?;
        case.validate()?;
        Ok(case)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GridError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }

    /// The bundled two-area, four-machine system.
    pub fn kundur_2area() -> Self {
        Self::from_json_str(KUNDUR_JSON).expect("bundled kundur case is valid")
    }

    /// The bundled 39-bus, ten-machine New England system.
    pub fn ieee39() -> Self {
        Self::from_json_str(IEEE39_JSON).expect("bundled ieee39 case is valid")
    }

    /// Resolves `kundur_2area` / `ieee39` (with or without `.json`) to the
    /// bundled data, anything else to a file on disk.
    pub fn load(name_or_path: &str) -> Result<Self, GridError> {
        let stem = Path::new(name_or_path)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or(name_or_path);
        if !Path::new(name_or_path).exists() {
            match stem {
                "kundur_2area" => return Ok(Self::kundur_2area()),
                "ieee39" => return Ok(Self::ieee39()),
                _ => {}
            }
        }
        Self::from_json_file(name_or_path)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let mut seen = HashSet::new();
        for bus in &self.buses {
            if !seen.insert(bus.id) {
                return Err(GridError::DuplicateBus(bus.id));
            }
        }
        let slack_count = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slack_count != 1 {
            return Err(GridError::Invalid(format!(
                "expected exactly one slack bus, found {slack_count}"
            )));
        }
        for (k, line) in self.lines.iter().enumerate() {
            for end in [line.from_bus, line.to_bus] {
                if !seen.contains(&end) {
                    return Err(GridError::UnknownBus {
                        bus: end,
                        context: format!("line {k}"),
                    });
                }
            }
            if line.r == 0.0 && line.x == 0.0 {
                return Err(GridError::Invalid(format!("line {k} has zero impedance")));
            }
            if !(line.tap > 0.0) {
                return Err(GridError::Invalid(format!("line {k} has non-positive tap")));
            }
        }
        for (k, gen) in self.generators.iter().enumerate() {
            if !seen.contains(&gen.bus) {
                return Err(GridError::UnknownBus {
                    bus: gen.bus,
                    context: format!("generator {k}"),
                });
            }
            let ok = gen.h > 0.0
                && gen.td0_prime > 0.0
                && gen.xd_prime > 0.0
                && gen.xd >= gen.xd_prime
                && gen.ta > 0.0
                && gen.rating > 0.0
                && gen.efd_min < gen.efd_max;
            if !ok {
                return Err(GridError::Invalid(format!(
                    "generator {k} at bus {} violates parameter bounds",
                    gen.bus
                )));
            }
        }
        let mut gen_buses = HashSet::new();
        for gen in &self.generators {
            if !gen_buses.insert(gen.bus) {
                return Err(GridError::Invalid(format!(
                    "more than one generator at bus {}",
                    gen.bus
                )));
            }
        }
        for bus in &self.buses {
            if bus.kind != BusKind::Pq && !gen_buses.contains(&bus.id) {
                return Err(GridError::Invalid(format!(
                    "voltage-controlled bus {} has no generator",
                    bus.id
                )));
            }
        }
        for pv in &self.pv_units {
            if !seen.contains(&pv.bus) {
                return Err(GridError::UnknownBus {
                    bus: pv.bus,
                    context: "pv unit".into(),
                });
            }
        }
        Ok(())
    }

    /// Map from bus id to dense index.
    pub fn bus_index(&self) -> HashMap<u32, usize> {
        self.buses
            .iter()
            .enumerate()
            .map(|(i, b)| (b.id, i))
            .collect()
    }

    pub fn index_of_bus(&self, id: u32) -> Result<usize, GridError> {
        self.buses
            .iter()
            .position(|b| b.id == id)
            .ok_or(GridError::UnknownBus {
                bus: id,
                context: "lookup".into(),
            })
    }

    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated")
    }

    /// Index of the generator attached to `bus_id`.
    pub fn generator_at(&self, bus_id: u32) -> Option<usize> {
        self.generators.iter().position(|g| g.bus == bus_id)
    }

    pub fn total_load_mw(&self) -> f64 {
        self.buses.iter().map(|b| b.p_load).sum()
    }

    pub fn area_of(&self, bus_id: u32) -> Option<u32> {
        self.buses.iter().find(|b| b.id == bus_id).map(|b| b.area)
    }
}
