//! Source power injections and the closed-loop right-hand sides.
//!
//! The power-consensus controller is evaluated in its voltage-scaled form
//!
//! ```text
//! C_s dV_s/dt = −[V_s] L_c C_s⁻¹ P_s,    P_s = [V_s](Yss V_s + Ysl V_l)
//! ```
//!
//! which drives `P_i / C_i` to a common value while conserving `Σ C_i ln V_i`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, GridError, Result};
use crate::loadmodel::{load_current, ZipLoadBank};
use crate::netmodel::ConductanceBlocks;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// Voltage-scaled power consensus.
    Consensus,
    /// Distributed averaging integral controller with auxiliary currents `p`.
    Dapi,
    /// Power consensus with load buses held at fixed voltages.
    ConstantVoltage,
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Consensus => "consensus",
            Self::Dapi => "dapi",
            Self::ConstantVoltage => "constant_voltage",
        })
    }
}

/// Sharing weights `C` and, for the integral controller, weights `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerParams {
    c: DVector<f64>,
    d: Option<DVector<f64>>,
}

impl ControllerParams {
    pub fn new(c: DVector<f64>, d: Option<DVector<f64>>) -> Result<Self> {
        if let Some(i) = c.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(GridError::InvalidParameter(format!(
                "sharing weight C[{i}] = {} must be positive",
                c[i]
            )));
        }
        if let Some(d) = &d {
            check_len("D", d.len(), c.len())?;
            if let Some(i) = d.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(GridError::InvalidParameter(format!(
                    "integral weight D[{i}] = {} must be positive",
                    d[i]
                )));
            }
        }
        Ok(Self { c, d })
    }

    pub fn consensus(c: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(c), None)
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn d(&self) -> Option<&DVector<f64>> {
        self.d.as_ref()
    }

    pub fn n_sources(&self) -> usize {
        self.c.len()
    }

    pub(crate) fn require_d(&self) -> Result<&DVector<f64>> {
        self.d
            .as_ref()
            .ok_or_else(|| GridError::InvalidParameter("integral weights D are required".into()))
    }
}

/// Instantaneous state of the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub t: f64,
    pub vs: DVector<f64>,
    pub vl: DVector<f64>,
    /// Auxiliary currents, integral controller only.
    pub p: Option<DVector<f64>>,
}

/// `P_s = [V_s](Yss V_s + Ysl V_l)`.
pub fn source_powers(blocks: &ConductanceBlocks, vs: &DVector<f64>, vl: &DVector<f64>) -> DVector<f64> {
    vs.component_mul(&blocks.source_currents(vs, vl))
}

/// `C_s⁻¹ P_s`, the quantity the consensus averages.
fn weighted_powers(c: &DVector<f64>, ps: &DVector<f64>) -> DVector<f64> {
    ps.component_div(c)
}

/// `dV_s/dt = −C_s⁻¹ [V_s] L_c C_s⁻¹ P_s`.
pub fn consensus_rhs(
    blocks: &ConductanceBlocks,
    lc: &DMatrix<f64>,
    params: &ControllerParams,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> DVector<f64> {
    consensus_log_rhs(blocks, lc, params, vs, vl).component_mul(vs)
}

/// `d ln V_s/dt = −C_s⁻¹ L_c C_s⁻¹ P_s`; the simulator integrates in these coordinates.
pub fn consensus_log_rhs(
    blocks: &ConductanceBlocks,
    lc: &DMatrix<f64>,
    params: &ControllerParams,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> DVector<f64> {
    let ps = source_powers(blocks, vs, vl);
    let q = weighted_powers(params.c(), &ps);
    -(lc * q).component_div(params.c())
}

/// Integral controller:
/// `C dV/dt = −I_s + p`, `D dp/dt = I_s − p − L_c C⁻¹ [V_s] p`.
pub fn dapi_rhs(
    blocks: &ConductanceBlocks,
    lc: &DMatrix<f64>,
    params: &ControllerParams,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
    p: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d = params.require_d()?;
    check_len("auxiliary currents", p.len(), vs.len())?;
    let is = blocks.source_currents(vs, vl);
    let dv = (p - &is).component_div(params.c());
    let shared = lc * vs.component_mul(p).component_div(params.c());
    let dp = (is - p - shared).component_div(d);
    Ok((dv, dp))
}

/// Consensus dynamics with the load buses clamped at `vl_bar`.
pub fn constant_voltage_rhs(
    blocks: &ConductanceBlocks,
    lc: &DMatrix<f64>,
    params: &ControllerParams,
    vs: &DVector<f64>,
    vl_bar: &DVector<f64>,
) -> DVector<f64> {
    consensus_rhs(blocks, lc, params, vs, vl_bar)
}

/// Load dynamics when each load bus carries a capacitor `Cl`:
/// `Cl dV_l/dt = I_l(V_l) − (Yls V_s + Yll V_l)`.
pub fn capacitive_load_rhs(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    cl: &DVector<f64>,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("load capacitances", cl.len(), bank.len())?;
    let mismatch = load_current(bank, vl)? - blocks.load_network_currents(vs, vl);
    Ok(mismatch.component_div(cl))
}

/// `max_{i,j} |P_i/C_i − P_j/C_j|`.
pub fn sharing_residual(c: &DVector<f64>, ps: &DVector<f64>) -> f64 {
    let q = weighted_powers(c, ps);
    q.max() - q.min()
}
