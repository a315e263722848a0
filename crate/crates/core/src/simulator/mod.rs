//! Closed-loop integration of the microgrid DAE.
//!
//! In DAE mode the load voltages are eliminated at every stage evaluation by
//! solving the load current balance, warm-started from the previous solution.
//! Source voltages under the consensus controllers are integrated as `ln V_s`,
//! which keeps them positive and makes `Σ C_i ln V_i` a linear invariant that
//! explicit Runge–Kutta schemes preserve to roundoff.

mod integrate;
mod schedule;
mod trajectory;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

pub use integrate::RunStats;
pub use schedule::{LoadEvent, LoadSchedule};
pub use trajectory::{Sample, Trajectory};

use integrate::{Coord, OdeSystem, Scheme};

use crate::controllers::{
    capacitive_load_rhs, consensus_log_rhs, dapi_rhs, sharing_residual, source_powers,
    ControllerKind, ControllerParams, GridState,
};
use crate::error::{check_len, check_positive, GridError, Result};
use crate::loadmodel::{solve_load_voltages, zi_load_voltages, NewtonSettings, ZipLoadBank};
use crate::netmodel::{build_laplacian, comm_laplacian, ConductanceBlocks, MicrogridNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Rk4Fixed,
    Rk45Adaptive,
    /// Linearly implicit order 2(3); for stiff runs such as the integral controller.
    Rosenbrock23,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorSettings {
    pub method: Method,
    /// Step for `Rk4Fixed` (s).
    pub dt: f64,
    pub rtol: f64,
    /// Absolute tolerance in volts (amperes for auxiliary currents).
    pub atol: f64,
    /// Optional first trial step for `Rk45Adaptive` (s).
    pub h_init: Option<f64>,
    pub voltage_floor: f64,
    pub newton: NewtonSettings,
    /// Observation interval; defaults to `t_end / 2000`.
    pub sample_interval: Option<f64>,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            method: Method::Rk45Adaptive,
            dt: 1e-5,
            rtol: 1e-8,
            atol: 1e-10,
            h_init: None,
            voltage_floor: 1e-3,
            newton: NewtonSettings::default(),
            sample_interval: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimulationMode {
    /// Algebraic load constraint.
    Dae,
    /// Load buses carry capacitors (farads) and integrate as ODEs.
    Capacitive { cl: DVector<f64> },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: MicrogridNetwork,
    pub loads: ZipLoadBank,
    pub params: ControllerParams,
    pub controller: ControllerKind,
    pub initial_vs: DVector<f64>,
    /// DAE mode: Newton guess (ZI seed when absent). Capacitive mode: initial
    /// state (ZI seed when absent). Constant-voltage controller: the clamped voltages.
    pub initial_vl: Option<DVector<f64>>,
    pub t_end: f64,
    pub events: Vec<LoadEvent>,
    pub integrator: IntegratorSettings,
    pub mode: SimulationMode,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let ns = self.network.n_sources();
        let nl = self.network.n_loads();
        check_len("sharing weights C", self.params.n_sources(), ns)?;
        check_len("load bank", self.loads.len(), nl)?;
        check_len("initial source voltages", self.initial_vs.len(), ns)?;
        check_positive("initial source voltage", self.initial_vs.as_slice())?;
        if let Some(vl) = &self.initial_vl {
            check_len("initial load voltages", vl.len(), nl)?;
            check_positive("initial load voltage", vl.as_slice())?;
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(GridError::InvalidParameter(format!("t_end = {} must be positive", self.t_end)));
        }
        let ig = &self.integrator;
        if !(ig.rtol > 0.0 && ig.atol > 0.0 && ig.newton.tol > 0.0) {
            return Err(GridError::InvalidParameter("tolerances must be positive".into()));
        }
        if ig.method == Method::Rk4Fixed && !(ig.dt > 0.0) {
            return Err(GridError::InvalidParameter("dt must be positive".into()));
        }
        if let Some(si) = ig.sample_interval {
            if !(si > 0.0) {
                return Err(GridError::InvalidParameter("sample interval must be positive".into()));
            }
        }
        let vmin = self
            .initial_vs
            .iter()
            .chain(self.initial_vl.iter().flat_map(|v| v.iter()))
            .fold(f64::INFINITY, |a, &b| a.min(b));
        if !(ig.voltage_floor >= 0.0 && ig.voltage_floor < vmin) {
            return Err(GridError::InvalidParameter(format!(
                "voltage floor {} must be below the smallest initial voltage {vmin}",
                ig.voltage_floor
            )));
        }
        if self.controller == ControllerKind::Dapi {
            self.params.require_d()?;
        }
        if let SimulationMode::Capacitive { cl } = &self.mode {
            check_len("load capacitances", cl.len(), nl)?;
            check_positive("load capacitance", cl.as_slice())?;
            if self.controller == ControllerKind::ConstantVoltage {
                return Err(GridError::InvalidParameter(
                    "capacitive mode is incompatible with the constant-voltage controller".into(),
                ));
            }
        }
        if self.controller == ControllerKind::ConstantVoltage && self.initial_vl.is_none() && nl > 0 {
            return Err(GridError::InvalidParameter(
                "constant-voltage controller needs the clamped load voltages".into(),
            ));
        }
        LoadSchedule::new(self.loads.clone(), &self.events)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<LoadSchedule> {
        LoadSchedule::new(self.loads.clone(), &self.events)
    }

    /// `Σ C_i ln V_i(0)`.
    pub fn initial_geomean_log(&self) -> f64 {
        geomean_log(self.params.c(), &self.initial_vs)
    }

    pub fn with_controller(&self, controller: ControllerKind) -> Scenario {
        Scenario {
            controller,
            ..self.clone()
        }
    }
}

pub fn geomean_log(c: &DVector<f64>, vs: &DVector<f64>) -> f64 {
    c.iter().zip(vs.iter()).map(|(c, v)| c * v.ln()).sum()
}

/// The closed loop as an ODE in the integrator's coordinates.
struct Plant<'a> {
    blocks: ConductanceBlocks,
    lc: DMatrix<f64>,
    params: &'a ControllerParams,
    controller: ControllerKind,
    schedule: LoadSchedule,
    cl: Option<DVector<f64>>,
    vl_clamped: Option<DVector<f64>>,
    newton: NewtonSettings,
    floor: f64,
    vl_cache: DVector<f64>,
}

impl<'a> Plant<'a> {
    fn ns(&self) -> usize {
        self.blocks.n_sources()
    }

    fn nl(&self) -> usize {
        self.blocks.n_loads()
    }

    fn log_sources(&self) -> bool {
        self.controller != ControllerKind::Dapi
    }

    fn aux_len(&self) -> usize {
        if self.controller == ControllerKind::Dapi {
            self.ns()
        } else {
            0
        }
    }

    fn pack(&self, vs: &DVector<f64>, vl: &DVector<f64>, p: Option<&DVector<f64>>) -> DVector<f64> {
        let mut y = Vec::with_capacity(self.ns() * 2 + self.nl());
        if self.log_sources() {
            y.extend(vs.iter().map(|v| v.ln()));
        } else {
            y.extend(vs.iter());
        }
        if let Some(p) = p {
            y.extend(p.iter());
        }
        if self.cl.is_some() {
            y.extend(vl.iter());
        }
        DVector::from_vec(y)
    }

    fn check_floor(&self, t: f64, vs: &DVector<f64>, vl: &DVector<f64>) -> Result<()> {
        for (bus, &v) in vs.iter().chain(vl.iter()).enumerate() {
            if !(v > self.floor) {
                return Err(GridError::Collapse { t, bus, voltage: v });
            }
        }
        Ok(())
    }

    /// Recovers the physical state, solving for load voltages in DAE mode.
    fn decode(&mut self, t: f64, y: &DVector<f64>, bank: &ZipLoadBank) -> Result<GridState> {
        let ns = self.ns();
        let nl = self.nl();
        let vs = if self.log_sources() {
            y.rows(0, ns).map(f64::exp)
        } else {
            y.rows(0, ns).into_owned()
        };
        let p = (self.aux_len() > 0).then(|| y.rows(ns, ns).into_owned());
        self.check_floor(t, &vs, &DVector::zeros(0))?;
        let vl = if let Some(clamped) = &self.vl_clamped {
            clamped.clone()
        } else if self.cl.is_some() {
            y.rows(ns + self.aux_len(), nl).into_owned()
        } else {
            let vl = solve_load_voltages(&self.blocks, bank, &vs, &self.vl_cache, &self.newton)
                .map_err(|e| GridError::Infeasible { t, source: Box::new(e) })?;
            self.vl_cache.copy_from(&vl);
            vl
        };
        self.check_floor(t, &vs, &vl)?;
        Ok(GridState { t, vs, vl, p })
    }
}

impl OdeSystem for Plant<'_> {
    fn coord(&self, index: usize) -> Coord {
        if index < self.ns() && self.log_sources() {
            Coord::Log
        } else {
            Coord::Linear
        }
    }

    fn eval(&mut self, t: f64, step_start: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let bank = self.schedule.bank_at(t, step_start);
        let st = self.decode(t, y, &bank)?;
        let mut dy = Vec::with_capacity(y.len());
        match self.controller {
            ControllerKind::Consensus | ControllerKind::ConstantVoltage => {
                let dlog = consensus_log_rhs(&self.blocks, &self.lc, self.params, &st.vs, &st.vl);
                dy.extend(dlog.iter());
            }
            ControllerKind::Dapi => {
                let p = st.p.as_ref().expect("integral controller state has p");
                let (dv, dp) = dapi_rhs(&self.blocks, &self.lc, self.params, &st.vs, &st.vl, p)?;
                dy.extend(dv.iter());
                dy.extend(dp.iter());
            }
        }
        if let Some(cl) = &self.cl {
            let dvl = capacitive_load_rhs(&self.blocks, &bank, cl, &st.vs, &st.vl)
                .map_err(|e| GridError::Infeasible { t, source: Box::new(e) })?;
            dy.extend(dvl.iter());
        }
        Ok(DVector::from_vec(dy))
    }
}

/// Integrates the scenario over `[0, t_end]`.
pub fn simulate(scenario: &Scenario) -> Result<Trajectory> {
    scenario.validate()?;
    let blocks = build_laplacian(&scenario.network);
    let lc = comm_laplacian(&scenario.network);
    let schedule = scenario.schedule()?;
    let ig = &scenario.integrator;
    let ns = scenario.network.n_sources();
    let nl = scenario.network.n_loads();

    let bank0 = schedule.bank_at(0.0, 0.0);
    let vs0 = scenario.initial_vs.clone();
    let (vl0, clamped) = match (&scenario.controller, &scenario.mode) {
        (ControllerKind::ConstantVoltage, _) => {
            let vl = scenario.initial_vl.clone().unwrap_or_else(|| DVector::zeros(nl));
            (vl.clone(), Some(vl))
        }
        (_, SimulationMode::Capacitive { .. }) => {
            let vl = match &scenario.initial_vl {
                Some(v) => v.clone(),
                None => zi_load_voltages(&blocks, &bank0.without_power(), &vs0)?,
            };
            (vl, None)
        }
        (_, SimulationMode::Dae) => {
            let guess = match &scenario.initial_vl {
                Some(v) => v.clone(),
                None => zi_load_voltages(&blocks, &bank0.without_power(), &vs0)?,
            };
            let vl = solve_load_voltages(&blocks, &bank0, &vs0, &guess, &ig.newton)
                .map_err(|e| GridError::Infeasible { t: 0.0, source: Box::new(e) })?;
            (vl, None)
        }
    };

    let p0 = (scenario.controller == ControllerKind::Dapi)
        .then(|| blocks.source_currents(&vs0, &vl0));

    let cl = match &scenario.mode {
        SimulationMode::Capacitive { cl } => Some(cl.clone()),
        SimulationMode::Dae => None,
    };
    let mut plant = Plant {
        blocks,
        lc,
        params: &scenario.params,
        controller: scenario.controller,
        schedule,
        cl,
        vl_clamped: clamped,
        newton: ig.newton,
        floor: ig.voltage_floor,
        vl_cache: vl0.clone(),
    };
    let y0 = plant.pack(&vs0, &vl0, p0.as_ref());

    let samples = sample_times(scenario.t_end, ig.sample_interval);
    let scheme = match ig.method {
        Method::Rk4Fixed => Scheme::Rk4 { dt: ig.dt },
        Method::Rk45Adaptive => Scheme::Dopri5 {
            rtol: ig.rtol,
            atol: ig.atol,
            h_init: ig.h_init,
        },
        Method::Rosenbrock23 => Scheme::Rosenbrock23 {
            rtol: ig.rtol,
            atol: ig.atol,
            h_init: ig.h_init,
        },
    };
    let breakpoints = plant.schedule.breakpoints();
    let c = scenario.params.c().clone();
    let mut out: Vec<Sample> = Vec::with_capacity(samples.len());
    let log_sources = plant.log_sources();

    let stats = integrate::integrate(
        &mut plant,
        y0,
        scenario.t_end,
        scheme,
        &breakpoints,
        &samples,
        |plant, t, step_start, y| {
            let bank = plant.schedule.bank_at(t, step_start);
            let st = plant.decode(t, y, &bank)?;
            let ps = source_powers(&plant.blocks, &st.vs, &st.vl);
            let geomean = if log_sources {
                (0..ns).map(|i| c[i] * y[i]).sum()
            } else {
                geomean_log(&c, &st.vs)
            };
            out.push(Sample {
                t,
                vs: st.vs,
                vl: st.vl,
                p: st.p,
                ps,
                m: None,
                geomean_log: geomean,
            });
            Ok(())
        },
    )?;

    Ok(Trajectory {
        c: scenario.params.c().clone(),
        samples: out,
        stats,
    })
}

fn sample_times(t_end: f64, interval: Option<f64>) -> Vec<f64> {
    let dt = interval.unwrap_or(t_end / 2000.0).min(t_end);
    let n = (t_end / dt - 1e-9).ceil().max(1.0) as usize;
    let mut times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    times.push(t_end);
    times
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateReport {
    pub window_s: f64,
    /// Largest finite-difference `|dV_s/dt|` over the final window (V/s).
    pub max_dvs_dt: f64,
    /// `max_{i,j} |P_i/C_i − P_j/C_j|` at the final sample.
    pub sharing_residual: f64,
    /// Sharing residual divided by `mean(|P/C|)`.
    pub sharing_relative: f64,
    pub geomean_drift: f64,
    pub steady: bool,
}

/// Summarises how settled the end of a trajectory is.
///
/// `steady` requires both the voltage rate and the relative sharing residual
/// to fall below `tol`.
pub fn steady_state_check(traj: &Trajectory, window: f64, tol: f64) -> SteadyStateReport {
    let last = traj.last();
    let start = last.t - window;
    let mut max_rate: f64 = 0.0;
    for w in traj.samples.windows(2) {
        if w[1].t <= start {
            continue;
        }
        let dt = w[1].t - w[0].t;
        let rate = (&w[1].vs - &w[0].vs).amax() / dt;
        max_rate = max_rate.max(rate);
    }
    let sharing = sharing_residual(&traj.c, &last.ps);
    let mean = last.ps.component_div(&traj.c).abs().mean();
    let rel = if mean > 0.0 { sharing / mean } else { sharing };
    let drift = (last.geomean_log - traj.first().geomean_log).abs();
    SteadyStateReport {
        window_s: window,
        max_dvs_dt: max_rate,
        sharing_residual: sharing,
        sharing_relative: rel,
        geomean_drift: drift,
        steady: max_rate <= tol && rel <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::Line;

    fn t_scenario() -> Scenario {
        let network = MicrogridNetwork::new(
            2,
            1,
            vec![Line::new(0, 2, 1.0), Line::new(1, 2, 1.0)],
            vec![(0, 1)],
        )
        .unwrap();
        Scenario {
            network,
            loads: ZipLoadBank::from_slices(&[-1.0], &[0.0], &[0.0]).unwrap(),
            params: ControllerParams::consensus(&[1.0, 1.0]).unwrap(),
            controller: ControllerKind::Consensus,
            initial_vs: DVector::from_vec(vec![50.0, 46.08]),
            initial_vl: None,
            t_end: 0.05,
            events: vec![],
            integrator: IntegratorSettings::default(),
            mode: SimulationMode::Dae,
        }
    }

    #[test]
    fn sample_grid() {
        let s = sample_times(1.0, Some(0.3));
        assert_eq!(s.len(), 5);
        assert_eq!(*s.last().unwrap(), 1.0);
        assert_eq!(sample_times(1.0, None).len(), 2001);
    }

    #[test]
    fn constant_trajectory_is_steady() {
        let mut sc = t_scenario();
        sc.initial_vs = DVector::from_vec(vec![48.0, 48.0]);
        let traj = simulate(&sc).unwrap();
        let rep = steady_state_check(&traj, 0.01, 1e-6);
        assert!(rep.steady, "{rep:?}");
        assert!(rep.geomean_drift < 1e-12);
    }

    #[test]
    fn mid_transient_not_steady() {
        let mut sc = t_scenario();
        sc.t_end = 2e-4;
        let traj = simulate(&sc).unwrap();
        let rep = steady_state_check(&traj, 1e-4, 1e-6);
        assert!(!rep.steady);
        assert!(rep.sharing_residual > 0.0);
    }

    #[test]
    fn validation_errors() {
        let mut sc = t_scenario();
        sc.t_end = 0.0;
        assert!(sc.validate().is_err());
        let mut sc = t_scenario();
        sc.initial_vs = DVector::from_vec(vec![48.0, -1.0]);
        assert!(sc.validate().is_err());
        let mut sc = t_scenario();
        sc.controller = ControllerKind::Dapi;
        assert!(sc.validate().is_err());
        let mut sc = t_scenario();
        sc.integrator.voltage_floor = 100.0;
        assert!(sc.validate().is_err());
        let mut sc = t_scenario();
        sc.mode = SimulationMode::Capacitive { cl: DVector::from_vec(vec![1e-3, 1.0]) };
        assert!(sc.validate().is_err());
    }

    #[test]
    fn collapse_reported() {
        // A constant-current demand far beyond what the line can carry at this voltage.
        let mut sc = t_scenario();
        sc.loads = ZipLoadBank::from_slices(&[-200.0], &[0.0], &[0.0]).unwrap();
        sc.initial_vs = DVector::from_vec(vec![48.0, 48.0]);
        let err = simulate(&sc).unwrap_err();
        assert!(
            matches!(err, GridError::Infeasible { .. } | GridError::Collapse { .. }),
            "{err:?}"
        );
    }
}
