//! ZIP load models and the algebraic load-voltage constraint.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, check_positive, GridError, Result};
use crate::linalg;
use crate::netmodel::ConductanceBlocks;

/// Per-load constant-current (`istar`, A, ≤ 0), shunt conductance (`ystar`, S, ≥ 0)
/// and constant-power (`pstar`, W, ≤ 0) components.
#[derive(Debug, Clone, PartialEq)]
pub struct ZipLoadBank {
    istar: DVector<f64>,
    ystar: DVector<f64>,
    pstar: DVector<f64>,
}

impl ZipLoadBank {
    pub fn new(istar: DVector<f64>, ystar: DVector<f64>, pstar: DVector<f64>) -> Result<Self> {
        let n = istar.len();
        check_len("ystar", ystar.len(), n)?;
        check_len("pstar", pstar.len(), n)?;
        for i in 0..n {
            if !(istar[i] <= 0.0) {
                return Err(GridError::InvalidLoads(format!(
                    "constant current {} at load {i} must be <= 0",
                    istar[i]
                )));
            }
            if !(ystar[i] >= 0.0) || !ystar[i].is_finite() {
                return Err(GridError::InvalidLoads(format!(
                    "shunt conductance {} at load {i} must be >= 0",
                    ystar[i]
                )));
            }
            if !(pstar[i] <= 0.0) {
                return Err(GridError::InvalidLoads(format!(
                    "constant power {} at load {i} must be <= 0",
                    pstar[i]
                )));
            }
        }
        Ok(Self {
            istar,
            ystar,
            pstar,
        })
    }

    pub fn from_slices(istar: &[f64], ystar: &[f64], pstar: &[f64]) -> Result<Self> {
        Self::new(
            DVector::from_column_slice(istar),
            DVector::from_column_slice(ystar),
            DVector::from_column_slice(pstar),
        )
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            istar: DVector::zeros(n),
            ystar: DVector::zeros(n),
            pstar: DVector::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.istar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.istar.is_empty()
    }

    pub fn istar(&self) -> &DVector<f64> {
        &self.istar
    }

    pub fn ystar(&self) -> &DVector<f64> {
        &self.ystar
    }

    pub fn pstar(&self) -> &DVector<f64> {
        &self.pstar
    }

    /// True when no load has a constant-power component.
    pub fn is_zi(&self) -> bool {
        self.pstar.iter().all(|&p| p == 0.0)
    }

    /// Same bank with every constant-power component removed.
    pub fn without_power(&self) -> Self {
        Self {
            pstar: DVector::zeros(self.len()),
            ..self.clone()
        }
    }

    /// Same bank with constant-power components multiplied by `factor` (≥ 0).
    pub fn with_power_scaled(&self, factor: f64) -> Self {
        Self {
            pstar: &self.pstar * factor,
            ..self.clone()
        }
    }

    /// Replaces the three components of a single load, validating signs.
    pub fn with_load(&self, index: usize, istar: f64, ystar: f64, pstar: f64) -> Result<Self> {
        let mut out = self.clone();
        out.istar[index] = istar;
        out.ystar[index] = ystar;
        out.pstar[index] = pstar;
        Self::new(out.istar, out.ystar, out.pstar)
    }

    pub(crate) fn set_load_unchecked(&mut self, index: usize, istar: f64, ystar: f64, pstar: f64) {
        self.istar[index] = istar;
        self.ystar[index] = ystar;
        self.pstar[index] = pstar;
    }
}

/// `I_l(V_l) = I* − Y*·V_l + P*/V_l`, componentwise.
pub fn load_current(bank: &ZipLoadBank, vl: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("load voltages", vl.len(), bank.len())?;
    check_positive("load voltage", vl.as_slice())?;
    Ok(DVector::from_fn(bank.len(), |i, _| {
        bank.istar[i] - bank.ystar[i] * vl[i] + bank.pstar[i] / vl[i]
    }))
}

/// Diagonal of `∂I_l/∂V_l`: `−Y* − P*/V_l²`.
pub fn load_current_jacobian(bank: &ZipLoadBank, vl: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("load voltages", vl.len(), bank.len())?;
    check_positive("load voltage", vl.as_slice())?;
    Ok(DVector::from_fn(bank.len(), |i, _| {
        -bank.ystar[i] - bank.pstar[i] / (vl[i] * vl[i])
    }))
}

/// Current balance at the loads: `I_l(V_l) − Yll V_l − Yls V_s`.
pub fn load_balance_residual(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(load_current(bank, vl)? - blocks.load_network_currents(vs, vl))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonSettings {
    /// Residual threshold in amperes (infinity norm).
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Load voltages for ZI loads: `V_l = (Yll + Y*)⁻¹ (I* − Yls V_s)`.
///
/// Constant-power components of `bank` are ignored, which makes this the
/// natural seed for the Newton solve of the full ZIP constraint.
pub fn zi_load_voltages(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    vs: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_len("source voltages", vs.len(), blocks.n_sources())?;
    check_len("load bank", bank.len(), blocks.n_loads())?;
    let a = &blocks.yll + linalg::diag(&bank.ystar);
    let rhs = &bank.istar - &blocks.yls * vs;
    linalg::solve(&a, &rhs, "Yll + Y*")
}

/// Solves the load current balance for `V_l` given `V_s`.
///
/// ZI banks use the closed form. Otherwise a damped Newton iteration starts
/// from `guess`, halving the step until the iterate stays positive and the
/// residual decreases.
pub fn solve_load_voltages(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    vs: &DVector<f64>,
    guess: &DVector<f64>,
    settings: &NewtonSettings,
) -> Result<DVector<f64>> {
    check_len("source voltages", vs.len(), blocks.n_sources())?;
    check_len("load bank", bank.len(), blocks.n_loads())?;
    check_len("load-voltage guess", guess.len(), blocks.n_loads())?;
    if bank.is_empty() {
        return Ok(DVector::zeros(0));
    }
    if bank.is_zi() {
        let vl = zi_load_voltages(blocks, bank, vs)?;
        if vl.iter().any(|&v| !(v > 0.0)) {
            let residual = linalg::inf_norm(&(&bank.istar - &blocks.yls * vs));
            return Err(GridError::AlgebraicSolve {
                iterations: 0,
                residual,
            });
        }
        return Ok(vl);
    }
    check_positive("load-voltage guess", guess.as_slice())?;

    let network_part = &blocks.yls * vs;
    let residual = |vl: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(vl.len(), |i, _| {
            bank.istar[i] - bank.ystar[i] * vl[i] + bank.pstar[i] / vl[i]
        }) - &blocks.yll * vl
            - &network_part
    };

    let mut vl = guess.clone();
    let mut f = residual(&vl);
    let mut norm = linalg::inf_norm(&f);
    let jacobian = |vl: &DVector<f64>| -> DMatrix<f64> {
        let jl = DVector::from_fn(vl.len(), |i, _| {
            -bank.ystar[i] - bank.pstar[i] / (vl[i] * vl[i])
        });
        linalg::diag(&jl) - &blocks.yll
    };
    for iteration in 0..=settings.max_iter {
        if norm < settings.tol {
            // One more full step drives the residual to roundoff, which keeps the
            // right-hand side smooth enough for finite-difference Jacobians.
            if norm > 0.0 {
                if let Ok(step) = linalg::solve(&jacobian(&vl), &(-&f), "load-flow Jacobian") {
                    let candidate = &vl + step;
                    if candidate.iter().all(|&v| v > 0.0) && linalg::inf_norm(&residual(&candidate)) <= norm {
                        return Ok(candidate);
                    }
                }
            }
            return Ok(vl);
        }
        if iteration == settings.max_iter {
            break;
        }
        let jac = jacobian(&vl);
        let step = linalg::solve(&jac, &(-&f), "load-flow Jacobian").map_err(|_| {
            GridError::AlgebraicSolve {
                iterations: iteration,
                residual: norm,
            }
        })?;
        let mut alpha = 1.0;
        loop {
            let candidate = &vl + &step * alpha;
            if candidate.iter().all(|&v| v > 0.0) {
                let fc = residual(&candidate);
                let nc = linalg::inf_norm(&fc);
                if nc < norm {
                    vl = candidate;
                    f = fc;
                    norm = nc;
                    break;
                }
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err(GridError::AlgebraicSolve {
                    iterations: iteration + 1,
                    residual: norm,
                });
            }
        }
    }
    Err(GridError::AlgebraicSolve {
        iterations: settings.max_iter,
        residual: norm,
    })
}
