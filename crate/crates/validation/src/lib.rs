//! Random networks and scenario lookup shared by the property and acceptance tests.

#[cfg(test)]
mod properties;

use std::path::PathBuf;

use dcgrid::controllers::ControllerParams;
use dcgrid::loadmodel::ZipLoadBank;
use dcgrid::netmodel::{build_laplacian, comm_laplacian, ConductanceBlocks, Line, MicrogridNetwork};
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub struct RandomGrid {
    pub network: MicrogridNetwork,
    pub blocks: ConductanceBlocks,
    pub lc: DMatrix<f64>,
    pub params: ControllerParams,
    pub bank: ZipLoadBank,
}

impl RandomGrid {
    pub fn c(&self) -> &DVector<f64> {
        self.params.c()
    }

    pub fn n_sources(&self) -> usize {
        self.network.n_sources()
    }

    pub fn n_loads(&self) -> usize {
        self.network.n_loads()
    }
}

#[derive(Clone, Copy, PartialEq)]
pub enum Loads {
    /// Impedance and current components only.
    Zi,
    /// Adds constant-power components of at most `max_power` watts per load.
    Zip { max_power: f64 },
}

/// A connected network with a random spanning tree plus a few chords, a
/// connected communication graph and consuming loads sized for ~48 V operation.
pub fn random_grid(seed: u64, max_sources: usize, max_loads: usize, loads: Loads) -> RandomGrid {
    let mut rng = StdRng::seed_from_u64(seed);
    let ns = rng.gen_range(1..=max_sources);
    let nl = rng.gen_range(1..=max_loads);
    random_grid_sized(&mut rng, ns, nl, loads)
}

pub fn random_grid_sized(rng: &mut StdRng, ns: usize, nl: usize, loads: Loads) -> RandomGrid {
    let n = ns + nl;
    let mut lines = Vec::new();
    let mut used = std::collections::HashSet::new();
    // Random spanning tree: attach each node to an earlier one in a shuffled order.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    for k in 1..n {
        let a = order[k];
        let b = order[rng.gen_range(0..k)];
        used.insert((a.min(b), a.max(b)));
        lines.push(Line::new(a, b, rng.gen_range(0.5..3.0)));
    }
    for _ in 0..rng.gen_range(0..=n / 2) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && used.insert((a.min(b), a.max(b))) {
            lines.push(Line::new(a, b, rng.gen_range(0.5..3.0)));
        }
    }
    let mut comm: Vec<(usize, usize)> = (1..ns).map(|i| (rng.gen_range(0..i), i)).collect();
    if ns > 2 && rng.gen_bool(0.5) {
        comm.push((0, ns - 1));
        comm.dedup();
    }
    let network = MicrogridNetwork::new(ns, nl, lines, comm).expect("generated network is valid");
    let blocks = build_laplacian(&network);
    let lc = comm_laplacian(&network);
    let c: Vec<f64> = (0..ns).map(|_| rng.gen_range(0.5..2.0)).collect();
    let params = ControllerParams::new(DVector::from_vec(c), Some(DVector::from_element(ns, 1e-2))).unwrap();
    let istar: Vec<f64> = (0..nl).map(|_| -rng.gen_range(0.1..2.0)).collect();
    let ystar: Vec<f64> = (0..nl).map(|_| rng.gen_range(0.0..0.1)).collect();
    let pstar: Vec<f64> = match loads {
        Loads::Zi => vec![0.0; nl],
        Loads::Zip { max_power } => (0..nl).map(|_| -rng.gen_range(0.0..max_power)).collect(),
    };
    let bank = ZipLoadBank::from_slices(&istar, &ystar, &pstar).unwrap();
    RandomGrid {
        network,
        blocks,
        lc,
        params,
        bank,
    }
}

/// Positive voltages uniformly within `±spread` of `center`.
pub fn random_voltages(rng: &mut StdRng, n: usize, center: f64, spread: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| center + rng.gen_range(-spread..spread))
}

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// The scenarios bundled with the core crate.
pub fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios")
}

pub fn scenario_path(name: &str) -> PathBuf {
    scenario_dir().join(format!("{name}.json"))
}

pub fn bundled_scenarios() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    out.sort();
    out
}

/// Natural log of the geometric-mean pin `Σ C_i ln V_i` for `V_i = v`.
pub fn flat_geomean(c: &DVector<f64>, v: f64) -> f64 {
    c.sum() * v.ln()
}
