//! JSON scenario files.
//!
//! Units live in the key names (`_S`, `_A`, `_W`, `_V`, `_F`, `_s`) and unknown keys are
//! rejected, so a mistyped unit suffix fails loudly. Errors carry a JSON pointer.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controllers::{ControllerKind, ControllerParams};
use crate::error::GridError;
use crate::loadmodel::{NewtonSettings, ZipLoadBank};
use crate::netmodel::{Line, MicrogridNetwork};
use crate::simulator::{IntegratorSettings, LoadEvent, Method, Scenario, SimulationMode};

/// A schema or semantic error located by JSON pointer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub pointer: String,
    pub message: String,
}

impl ConfigError {
    fn at(pointer: impl Into<String>, message: impl fmt::Display) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{at}: {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub network: NetworkSpec,
    pub sources: SourcesSpec,
    pub loads: LoadsSpec,
    pub initial: InitialSpec,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub integrator: IntegratorSpec,
    #[serde(default)]
    pub mode: ModeSpec,
    pub t_end_s: f64,
    #[serde(default)]
    pub outputs: OutputsSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: NodesSpec,
    pub lines: Vec<LineSpec>,
    #[serde(default)]
    pub comm_edges: Vec<[u64; 2]>,
}

/// Node identifiers; any distinct integers.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodesSpec {
    pub sources: Vec<u64>,
    #[serde(default)]
    pub loads: Vec<u64>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSpec {
    pub from: u64,
    pub to: u64,
    pub conductance_S: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcesSpec {
    #[serde(rename = "C")]
    pub c: Vec<f64>,
    pub controller: ControllerKind,
    #[serde(rename = "D", default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<f64>>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadsSpec {
    pub Istar_A: Vec<f64>,
    pub Ystar_S: Vec<f64>,
    pub Pstar_W: Vec<f64>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub Vs_V: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Vl_V: Option<Vec<f64>>,
}

/// Omitted targets keep the value in force when the event starts.
#[allow(non_snake_case)]
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub load: u64,
    pub t_start_s: f64,
    pub t_end_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Istar_A: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Ystar_S: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Pstar_W: Option<f64>,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rtol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atol_V: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_init_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voltage_floor_V: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub newton_tol_A: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_newton_iter: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    #[default]
    Dae,
    Capacitive,
}

#[allow(non_snake_case)]
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    #[serde(default)]
    pub kind: ModeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub Cl_F: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_interval_s: Option<f64>,
}

/// A validated scenario plus the file-level metadata around it.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub name: Option<String>,
    pub scenario: Scenario,
    pub csv_path: Option<PathBuf>,
    /// External identifiers of sources then loads, in internal order.
    pub source_ids: Vec<u64>,
    pub load_ids: Vec<u64>,
}

/// Parses and validates scenario JSON text.
pub fn parse_scenario(text: &str) -> Result<LoadedScenario, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let pointer = pointer_of(e.path());
        let inner = e.into_inner();
        ConfigError::at(pointer, strip_location(&inner))
    })?;
    build(&file)
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::at("", format!("cannot read {}: {e}", path.display())))?;
    parse_scenario(&text)
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&key.replace('~', "~0").replace('/', "~1"));
            }
            Segment::Enum { variant } => {
                out.push('/');
                out.push_str(variant);
            }
            Segment::Unknown => out.push_str("/?"),
        }
    }
    out
}

fn strip_location(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.rfind(" at line ") {
        Some(i) => format!("{} (line {}, column {})", &s[..i], e.line(), e.column()),
        None => s,
    }
}

fn build(file: &ScenarioFile) -> Result<LoadedScenario, ConfigError> {
    let nodes = &file.network.nodes;
    let ns = nodes.sources.len();
    let nl = nodes.loads.len();
    if ns == 0 {
        return Err(ConfigError::at("/network/nodes/sources", "at least one source is required"));
    }
    let mut index: HashMap<u64, usize> = HashMap::new();
    for (k, &id) in nodes.sources.iter().chain(nodes.loads.iter()).enumerate() {
        if index.insert(id, k).is_some() {
            let ptr = if k < ns {
                format!("/network/nodes/sources/{k}")
            } else {
                format!("/network/nodes/loads/{}", k - ns)
            };
            return Err(ConfigError::at(ptr, format!("duplicate node id {id}")));
        }
    }
    let lookup = |id: u64, ptr: String| -> Result<usize, ConfigError> {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| ConfigError::at(ptr, format!("unknown node id {id}")))
    };

    let mut lines = Vec::with_capacity(file.network.lines.len());
    for (k, l) in file.network.lines.iter().enumerate() {
        let from = lookup(l.from, format!("/network/lines/{k}/from"))?;
        let to = lookup(l.to, format!("/network/lines/{k}/to"))?;
        if !(l.conductance_S > 0.0 && l.conductance_S.is_finite()) {
            return Err(ConfigError::at(
                format!("/network/lines/{k}/conductance_S"),
                "conductance must be positive",
            ));
        }
        lines.push(Line::new(from, to, l.conductance_S));
    }
    let mut comm = Vec::with_capacity(file.network.comm_edges.len());
    for (k, [a, b]) in file.network.comm_edges.iter().enumerate() {
        let ia = lookup(*a, format!("/network/comm_edges/{k}/0"))?;
        let ib = lookup(*b, format!("/network/comm_edges/{k}/1"))?;
        if ia >= ns || ib >= ns {
            return Err(ConfigError::at(
                format!("/network/comm_edges/{k}"),
                "communication edges must join two sources",
            ));
        }
        comm.push((ia, ib));
    }
    let network = MicrogridNetwork::new(ns, nl, lines, comm)
        .map_err(|e| ConfigError::at(network_pointer(&e), e))?;

    let c = vec_of(&file.sources.c, ns, "/sources/C")?;
    let d = match &file.sources.d {
        Some(d) => Some(vec_of(d, ns, "/sources/D")?),
        None => None,
    };
    if file.sources.controller == ControllerKind::Dapi && d.is_none() {
        return Err(ConfigError::at("/sources/D", "the dapi controller requires D"));
    }
    let params = ControllerParams::new(c, d).map_err(|e| ConfigError::at("/sources", e))?;

    let istar = vec_of(&file.loads.Istar_A, nl, "/loads/Istar_A")?;
    let ystar = vec_of(&file.loads.Ystar_S, nl, "/loads/Ystar_S")?;
    let pstar = vec_of(&file.loads.Pstar_W, nl, "/loads/Pstar_W")?;
    let loads = ZipLoadBank::new(istar, ystar, pstar).map_err(|e| ConfigError::at("/loads", e))?;

    let initial_vs = vec_of(&file.initial.Vs_V, ns, "/initial/Vs_V")?;
    if let Some(i) = initial_vs.iter().position(|&v| !(v > 0.0)) {
        return Err(ConfigError::at(format!("/initial/Vs_V/{i}"), "voltages must be positive"));
    }
    let initial_vl = match &file.initial.Vl_V {
        Some(v) => {
            let v = vec_of(v, nl, "/initial/Vl_V")?;
            if let Some(i) = v.iter().position(|&x| !(x > 0.0)) {
                return Err(ConfigError::at(format!("/initial/Vl_V/{i}"), "voltages must be positive"));
            }
            Some(v)
        }
        None => None,
    };

    let mut current = loads.clone();
    let mut events = Vec::with_capacity(file.events.len());
    for (k, ev) in file.events.iter().enumerate() {
        let ptr = format!("/events/{k}");
        let load = match index.get(&ev.load) {
            Some(&i) if i >= ns => i - ns,
            Some(_) => return Err(ConfigError::at(format!("{ptr}/load"), format!("node {} is a source", ev.load))),
            None => return Err(ConfigError::at(format!("{ptr}/load"), format!("unknown node id {}", ev.load))),
        };
        let target = (
            ev.Istar_A.unwrap_or(current.istar()[load]),
            ev.Ystar_S.unwrap_or(current.ystar()[load]),
            ev.Pstar_W.unwrap_or(current.pstar()[load]),
        );
        current = current
            .with_load(load, target.0, target.1, target.2)
            .map_err(|e| ConfigError::at(ptr.clone(), e))?;
        events.push(LoadEvent {
            load,
            t_start: ev.t_start_s,
            t_end: ev.t_end_s,
            target,
        });
    }

    if !(file.t_end_s > 0.0 && file.t_end_s.is_finite()) {
        return Err(ConfigError::at("/t_end_s", "must be positive"));
    }

    let ig = &file.integrator;
    let defaults = IntegratorSettings::default();
    let positive = |v: Option<f64>, ptr: &str, default: f64| -> Result<f64, ConfigError> {
        match v {
            Some(x) if x > 0.0 && x.is_finite() => Ok(x),
            Some(_) => Err(ConfigError::at(ptr, "must be positive")),
            None => Ok(default),
        }
    };
    let method = ig.method.unwrap_or(defaults.method);
    if method == Method::Rk4Fixed && ig.dt_s.is_none() {
        return Err(ConfigError::at("/integrator/dt_s", "rk4_fixed requires dt_s"));
    }
    let integrator = IntegratorSettings {
        method,
        dt: positive(ig.dt_s, "/integrator/dt_s", defaults.dt)?,
        rtol: positive(ig.rtol, "/integrator/rtol", defaults.rtol)?,
        atol: positive(ig.atol_V, "/integrator/atol_V", defaults.atol)?,
        h_init: match ig.h_init_s {
            Some(h) => Some(positive(Some(h), "/integrator/h_init_s", h)?),
            None => None,
        },
        voltage_floor: match ig.voltage_floor_V {
            Some(v) if v >= 0.0 => v,
            Some(_) => return Err(ConfigError::at("/integrator/voltage_floor_V", "must be non-negative")),
            None => defaults.voltage_floor,
        },
        newton: NewtonSettings {
            tol: positive(ig.newton_tol_A, "/integrator/newton_tol_A", defaults.newton.tol)?,
            max_iter: match ig.max_newton_iter {
                Some(0) => return Err(ConfigError::at("/integrator/max_newton_iter", "must be at least 1")),
                Some(n) => n,
                None => defaults.newton.max_iter,
            },
        },
        sample_interval: match file.outputs.sample_interval_s {
            Some(s) => Some(positive(Some(s), "/outputs/sample_interval_s", s)?),
            None => None,
        },
    };
    let vmin = initial_vs
        .iter()
        .chain(initial_vl.iter().flat_map(|v| v.iter()))
        .fold(f64::INFINITY, |a, &b| a.min(b));
    if integrator.voltage_floor >= vmin {
        return Err(ConfigError::at(
            "/integrator/voltage_floor_V",
            format!("must be below the smallest initial voltage {vmin}"),
        ));
    }

    let mode = match file.mode.kind {
        ModeKind::Dae => {
            if file.mode.Cl_F.is_some() {
                return Err(ConfigError::at("/mode/Cl_F", "only valid with kind = capacitive"));
            }
            SimulationMode::Dae
        }
        ModeKind::Capacitive => {
            let cl = file
                .mode
                .Cl_F
                .as_ref()
                .ok_or_else(|| ConfigError::at("/mode/Cl_F", "capacitive mode requires Cl_F"))?;
            let cl = vec_of(cl, nl, "/mode/Cl_F")?;
            if let Some(i) = cl.iter().position(|&x| !(x > 0.0)) {
                return Err(ConfigError::at(format!("/mode/Cl_F/{i}"), "capacitance must be positive"));
            }
            SimulationMode::Capacitive { cl }
        }
    };
    if file.sources.controller == ControllerKind::ConstantVoltage {
        if matches!(mode, SimulationMode::Capacitive { .. }) {
            return Err(ConfigError::at("/mode/kind", "constant_voltage cannot be combined with capacitive loads"));
        }
        if initial_vl.is_none() && nl > 0 {
            return Err(ConfigError::at("/initial/Vl_V", "constant_voltage needs the clamped load voltages"));
        }
    }

    let scenario = Scenario {
        network,
        loads,
        params,
        controller: file.sources.controller,
        initial_vs,
        initial_vl,
        t_end: file.t_end_s,
        events,
        integrator,
        mode,
    };
    scenario.validate().map_err(|e| ConfigError::at(semantic_pointer(&e), e))?;

    Ok(LoadedScenario {
        name: file.name.clone(),
        scenario,
        csv_path: file.outputs.csv_path.as_ref().map(PathBuf::from),
        source_ids: nodes.sources.clone(),
        load_ids: nodes.loads.clone(),
    })
}

fn vec_of(v: &[f64], expected: usize, ptr: &str) -> Result<DVector<f64>, ConfigError> {
    if v.len() != expected {
        return Err(ConfigError::at(ptr, format!("expected {expected} entries, found {}", v.len())));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(ConfigError::at(format!("{ptr}/{i}"), "must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

fn network_pointer(e: &GridError) -> &'static str {
    match e {
        GridError::CommDisconnected { .. } => "/network/comm_edges",
        _ => "/network/lines",
    }
}

fn semantic_pointer(e: &GridError) -> &'static str {
    match e {
        GridError::InvalidParameter(m) if m.contains("event") => "/events",
        GridError::InvalidParameter(m) if m.contains("floor") => "/integrator/voltage_floor_V",
        GridError::InvalidParameter(m) if m.contains("t_end") => "/t_end_s",
        GridError::InvalidParameter(_) => "/integrator",
        GridError::Dimension { .. } | GridError::Domain { .. } => "/initial",
        _ => "",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const T_NET: &str = r#"{
        "network": {
            "nodes": {"sources": [1, 2], "loads": [3]},
            "lines": [{"from": 1, "to": 3, "conductance_S": 1.0},
                      {"from": 2, "to": 3, "conductance_S": 1.0}],
            "comm_edges": [[1, 2]]
        },
        "sources": {"C": [1.0, 1.0], "controller": "consensus"},
        "loads": {"Istar_A": [-1.0], "Ystar_S": [0.0], "Pstar_W": [0.0]},
        "initial": {"Vs_V": [50.0, 46.08]},
        "t_end_s": 1.0
    }"#;

    fn tweak(f: impl FnOnce(&mut serde_json::Value)) -> String {
        let mut v: serde_json::Value = serde_json::from_str(T_NET).unwrap();
        f(&mut v);
        v.to_string()
    }

    #[test]
    fn parses_minimal_file() {
        let s = parse_scenario(T_NET).unwrap();
        assert_eq!(s.scenario.network.n_sources(), 2);
        assert_eq!(s.scenario.integrator, IntegratorSettings::default());
        assert_eq!(s.load_ids, vec![3]);
    }

    #[test]
    fn unknown_key_reports_pointer() {
        let text = tweak(|v| {
            v["network"]["lines"][1]["conductance"] = 1.0.into();
        });
        let err = parse_scenario(&text).unwrap_err();
        assert_eq!(err.pointer, "/network/lines/1/conductance");
        assert!(err.message.contains("conductance"), "{err}");
    }

    #[test]
    fn semantic_errors_report_pointers() {
        type Mutation = Box<dyn FnOnce(&mut serde_json::Value)>;
        let cases: Vec<(Mutation, &str)> = vec![
            (Box::new(|v| v["network"]["lines"][0]["to"] = 9.into()), "/network/lines/0/to"),
            (Box::new(|v| v["sources"]["C"] = serde_json::json!([1.0])), "/sources/C"),
            (Box::new(|v| v["loads"]["Pstar_W"] = serde_json::json!([5.0])), "/loads"),
            (Box::new(|v| v["initial"]["Vs_V"][1] = (-1.0).into()), "/initial/Vs_V/1"),
            (Box::new(|v| v["sources"]["controller"] = "dapi".into()), "/sources/D"),
            (Box::new(|v| v["t_end_s"] = 0.0.into()), "/t_end_s"),
            (Box::new(|v| v["sources"]["controller"] = "pid".into()), "/sources/controller"),
            (
                Box::new(|v| {
                    v["events"] = serde_json::json!([{"load": 1, "t_start_s": 0.1, "t_end_s": 0.2}])
                }),
                "/events/0/load",
            ),
        ];
        for (f, ptr) in cases {
            let err = parse_scenario(&tweak(f)).unwrap_err();
            assert_eq!(err.pointer, ptr, "{err}");
        }
    }

    #[test]
    fn events_default_to_current_values() {
        let text = tweak(|v| {
            v["events"] = serde_json::json!([
                {"load": 3, "t_start_s": 0.1, "t_end_s": 0.2, "Pstar_W": -5.0}
            ])
        });
        let s = parse_scenario(&text).unwrap();
        assert_eq!(s.scenario.events[0].target, (-1.0, 0.0, -5.0));
    }
}
