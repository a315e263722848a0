//! Resistive network model: node partition, weighted Laplacian blocks and Kron reduction.
//!
//! Nodes are indexed from zero with the `n_sources` source buses first and the
//! `n_loads` load buses after them, so the Laplacian splits into the blocks
//!
//! ```text
//! [ Yss  Ysl ]
//! [ Yls  Yll ]
//! ```

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{GridError, Result};
use crate::linalg;

/// A resistive line between two buses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Siemens, strictly positive.
    pub conductance: f64,
}

impl Line {
    pub fn new(from: usize, to: usize, conductance: f64) -> Self {
        Self {
            from,
            to,
            conductance,
        }
    }
}

/// Electrical graph plus the communication graph over the source buses.
///
/// Immutable once constructed; [`MicrogridNetwork::new`] rejects self-loops,
/// duplicate edges, non-positive conductances and disconnected graphs.
#[derive(Debug, Clone)]
pub struct MicrogridNetwork {
    n_sources: usize,
    n_loads: usize,
    lines: Vec<Line>,
    comm_edges: Vec<(usize, usize)>,
}

impl MicrogridNetwork {
    pub fn new(
        n_sources: usize,
        n_loads: usize,
        lines: Vec<Line>,
        comm_edges: Vec<(usize, usize)>,
    ) -> Result<Self> {
        if n_sources == 0 {
            return Err(GridError::InvalidNetwork(
                "at least one source bus is required".into(),
            ));
        }
        let n = n_sources + n_loads;
        let mut seen = HashSet::new();
        for (k, line) in lines.iter().enumerate() {
            if line.from >= n || line.to >= n {
                return Err(GridError::InvalidNetwork(format!(
                    "line {k} references bus outside 0..{n}"
                )));
            }
            if line.from == line.to {
                return Err(GridError::InvalidNetwork(format!(
                    "line {k} is a self-loop at bus {}",
                    line.from
                )));
            }
            if !(line.conductance > 0.0 && line.conductance.is_finite()) {
                return Err(GridError::InvalidNetwork(format!(
                    "line {k} has non-positive conductance {}",
                    line.conductance
                )));
            }
            let key = (line.from.min(line.to), line.from.max(line.to));
            if !seen.insert(key) {
                return Err(GridError::InvalidNetwork(format!(
                    "duplicate line between buses {} and {}",
                    key.0, key.1
                )));
            }
        }
        let mut comm_seen = HashSet::new();
        for &(a, b) in &comm_edges {
            if a >= n_sources || b >= n_sources {
                return Err(GridError::InvalidNetwork(format!(
                    "communication edge ({a}, {b}) touches a non-source bus"
                )));
            }
            if a == b {
                return Err(GridError::InvalidNetwork(format!(
                    "communication self-loop at source {a}"
                )));
            }
            if !comm_seen.insert((a.min(b), a.max(b))) {
                return Err(GridError::InvalidNetwork(format!(
                    "duplicate communication edge ({a}, {b})"
                )));
            }
        }

        let components = connected_components(n, lines.iter().map(|l| (l.from, l.to)));
        if components.len() > 1 {
            return Err(GridError::Disconnected { components });
        }
        let comm_components = connected_components(n_sources, comm_edges.iter().copied());
        if comm_components.len() > 1 {
            return Err(GridError::CommDisconnected {
                components: comm_components,
            });
        }

        Ok(Self {
            n_sources,
            n_loads,
            lines,
            comm_edges,
        })
    }

    pub fn n_sources(&self) -> usize {
        self.n_sources
    }

    pub fn n_loads(&self) -> usize {
        self.n_loads
    }

    pub fn n_nodes(&self) -> usize {
        self.n_sources + self.n_loads
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn comm_edges(&self) -> &[(usize, usize)] {
        &self.comm_edges
    }

    /// Full weighted Laplacian `B Γ Bᵀ`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let n = self.n_nodes();
        let mut y = DMatrix::zeros(n, n);
        for line in &self.lines {
            let (i, j, g) = (line.from, line.to, line.conductance);
            y[(i, i)] += g;
            y[(j, j)] += g;
            y[(i, j)] -= g;
            y[(j, i)] -= g;
        }
        y
    }
}

/// Components as sorted node lists, ordered by smallest member.
fn connected_components(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for (a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut label = vec![usize::MAX; n];
    let mut components = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start];
        label[start] = id;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if label[v] == usize::MAX {
                    label[v] = id;
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

/// Source/load blocks of the network Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceBlocks {
    pub yss: DMatrix<f64>,
    pub ysl: DMatrix<f64>,
    pub yls: DMatrix<f64>,
    pub yll: DMatrix<f64>,
}

impl ConductanceBlocks {
    pub fn n_sources(&self) -> usize {
        self.yss.nrows()
    }

    pub fn n_loads(&self) -> usize {
        self.yll.nrows()
    }

    /// Reassembles `[Yss Ysl; Yls Yll]`.
    pub fn full(&self) -> DMatrix<f64> {
        let (ns, nl) = (self.n_sources(), self.n_loads());
        let mut y = DMatrix::zeros(ns + nl, ns + nl);
        y.view_mut((0, 0), (ns, ns)).copy_from(&self.yss);
        y.view_mut((0, ns), (ns, nl)).copy_from(&self.ysl);
        y.view_mut((ns, 0), (nl, ns)).copy_from(&self.yls);
        y.view_mut((ns, ns), (nl, nl)).copy_from(&self.yll);
        y
    }

    /// Source current injections `Yss Vs + Ysl Vl`.
    pub fn source_currents(&self, vs: &DVector<f64>, vl: &DVector<f64>) -> DVector<f64> {
        &self.yss * vs + &self.ysl * vl
    }

    /// Load-node network currents `Yls Vs + Yll Vl` (the `B_l Γ Bᵀ V` term).
    pub fn load_network_currents(&self, vs: &DVector<f64>, vl: &DVector<f64>) -> DVector<f64> {
        &self.yls * vs + &self.yll * vl
    }
}

pub fn build_laplacian(net: &MicrogridNetwork) -> ConductanceBlocks {
    let y = net.laplacian();
    let (ns, nl) = (net.n_sources(), net.n_loads());
    ConductanceBlocks {
        yss: y.view((0, 0), (ns, ns)).into_owned(),
        ysl: y.view((0, ns), (ns, nl)).into_owned(),
        yls: y.view((ns, 0), (nl, ns)).into_owned(),
        yll: y.view((ns, ns), (nl, nl)).into_owned(),
    }
}

/// `Y_red = Yss − Ysl Yll⁻¹ Yls`, symmetrized.
pub fn kron_reduce(blocks: &ConductanceBlocks) -> Result<DMatrix<f64>> {
    schur(&blocks.yss, &blocks.ysl, &blocks.yll, &blocks.yls)
}

/// Kron reduction with diagonal shunt conductances absorbed into the load block:
/// `Ŷ_red = Yss − Ysl (Yll + diag(ystar))⁻¹ Yls`.
pub fn kron_reduce_with_shunts(
    blocks: &ConductanceBlocks,
    ystar: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    crate::error::check_len("ystar", ystar.len(), blocks.n_loads())?;
    if let Some(i) = ystar.iter().position(|&y| !(y >= 0.0)) {
        return Err(GridError::InvalidLoads(format!(
            "shunt conductance {} at load {i} is negative",
            ystar[i]
        )));
    }
    let yll = &blocks.yll + linalg::diag(ystar);
    schur(&blocks.yss, &blocks.ysl, &yll, &blocks.yls)
}

fn schur(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let dinv_c = linalg::solve_mat(d, c, "load conductance block")?;
    Ok(linalg::symmetrize(&(a - b * dinv_c)))
}

/// Unweighted Laplacian `D_c − A_c` of the communication graph.
pub fn comm_laplacian(net: &MicrogridNetwork) -> DMatrix<f64> {
    let n = net.n_sources();
    let mut l = DMatrix::zeros(n, n);
    for &(a, b) in net.comm_edges() {
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t_network(g1: f64, g2: f64) -> MicrogridNetwork {
        MicrogridNetwork::new(
            2,
            1,
            vec![Line::new(0, 2, g1), Line::new(1, 2, g2)],
            vec![(0, 1)],
        )
        .unwrap()
    }

    #[test]
    fn single_edge_blocks() {
        let net = MicrogridNetwork::new(1, 1, vec![Line::new(0, 1, 1.0)], vec![]).unwrap();
        let b = build_laplacian(&net);
        assert_eq!(b.yss[(0, 0)], 1.0);
        assert_eq!(b.ysl[(0, 0)], -1.0);
        assert_eq!(b.yls[(0, 0)], -1.0);
        assert_eq!(b.yll[(0, 0)], 1.0);
        let red = kron_reduce(&b).unwrap();
        assert_eq!(red[(0, 0)], 0.0);
    }

    #[test]
    fn t_network_blocks() {
        let b = build_laplacian(&t_network(0.3, 0.7));
        assert_eq!(b.yss, DMatrix::from_row_slice(2, 2, &[0.3, 0.0, 0.0, 0.7]));
        assert_eq!(b.ysl, DMatrix::from_row_slice(2, 1, &[-0.3, -0.7]));
        assert_eq!(b.yls, DMatrix::from_row_slice(1, 2, &[-0.3, -0.7]));
        assert_relative_eq!(b.yll[(0, 0)], 1.0);
    }

    #[test]
    fn t_network_kron() {
        let b = build_laplacian(&t_network(1.0, 1.0));
        let red = kron_reduce(&b).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_relative_eq!(red, expected, epsilon = 1e-15);

        let shunted = kron_reduce_with_shunts(&b, &DVector::from_element(1, 1.0)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0, 2.0 / 3.0]);
        assert_relative_eq!(shunted, expected, epsilon = 1e-15);

        let unshunted = kron_reduce_with_shunts(&b, &DVector::zeros(1)).unwrap();
        assert_eq!(unshunted, red);
    }

    #[test]
    fn comm_laplacians() {
        let net = t_network(1.0, 1.0);
        assert_eq!(
            comm_laplacian(&net),
            DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0])
        );
        let path = MicrogridNetwork::new(
            3,
            0,
            vec![Line::new(0, 1, 1.0), Line::new(1, 2, 1.0)],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        let lc = comm_laplacian(&path);
        assert_eq!(
            lc,
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0])
        );
        assert!((lc * DVector::from_element(3, 1.0)).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_graphs() {
        let disconnected = MicrogridNetwork::new(
            2,
            2,
            vec![Line::new(0, 2, 1.0), Line::new(1, 3, 1.0)],
            vec![(0, 1)],
        );
        match disconnected {
            Err(GridError::Disconnected { components }) => {
                assert_eq!(components, vec![vec![0, 2], vec![1, 3]]);
            }
            other => panic!("expected disconnected error, got {other:?}"),
        }
        let no_comm = MicrogridNetwork::new(2, 1, vec![Line::new(0, 2, 1.0), Line::new(1, 2, 1.0)], vec![]);
        assert!(matches!(no_comm, Err(GridError::CommDisconnected { .. })));
        let self_loop = MicrogridNetwork::new(1, 1, vec![Line::new(1, 1, 1.0), Line::new(0, 1, 1.0)], vec![]);
        assert!(matches!(self_loop, Err(GridError::InvalidNetwork(_))));
        let dup = MicrogridNetwork::new(1, 1, vec![Line::new(0, 1, 1.0), Line::new(1, 0, 2.0)], vec![]);
        assert!(matches!(dup, Err(GridError::InvalidNetwork(_))));
        let neg = MicrogridNetwork::new(1, 1, vec![Line::new(0, 1, -1.0)], vec![]);
        assert!(matches!(neg, Err(GridError::InvalidNetwork(_))));
        let comm_to_load = MicrogridNetwork::new(1, 1, vec![Line::new(0, 1, 1.0)], vec![(0, 1)]);
        assert!(matches!(comm_to_load, Err(GridError::InvalidNetwork(_))));
    }

    #[test]
    fn negative_shunt_rejected() {
        let b = build_laplacian(&t_network(1.0, 1.0));
        assert!(kron_reduce_with_shunts(&b, &DVector::from_element(1, -0.1)).is_err());
    }
}
