use std::fmt;

use lfo_core::grid::{solve_power_flow, GridCase, PowerFlowOptions};

use crate::error::LabError;

#[derive(Debug, Clone, PartialEq)]
pub struct PowerflowReport {
    pub case: String,
    pub iterations: usize,
    pub mismatch_pu: f64,
    /// Area 1 → area 2 tie-line export, MW, when the case has two areas.
    pub transfer_mw: Option<f64>,
    pub total_load_mw: f64,
}

impl fmt::Display for PowerflowReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "case {}", self.case)?;
        writeln!(
            f,
            "converged in {} iterations, mismatch {:.3e} pu",
            self.iterations, self.mismatch_pu
        )?;
        writeln!(f, "total load {:.1} MW", self.total_load_mw)?;
        if let Some(t) = self.transfer_mw {
            writeln!(f, "area 1 -> area 2 transfer {t:.1} MW")?;
        }
        Ok(())
    }
}

pub fn powerflow(case_name: &str) -> Result<PowerflowReport, LabError> {
    let case = GridCase::load(case_name)?;
    let sol = solve_power_flow(&case, &PowerFlowOptions::default())?;
    let two_areas = case.buses.iter().any(|b| b.area == 2);
    Ok(PowerflowReport {
        case: if case.name.is_empty() {
            case_name.to_string()
        } else {
            case.name.clone()
        },
        iterations: sol.iterations,
        mismatch_pu: sol.mismatch_norm,
        transfer_mw: two_areas.then(|| sol.area_transfer_mw(&case, 1, 2)),
        total_load_mw: case.total_load_mw(),
    })
}
