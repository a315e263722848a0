//! Energy function, its Bregman shift about an equilibrium, and trajectory audits.
//!
//! States are full voltage vectors `V = [V_s; V_l]`.
//!
//! `M(V) = ½ Vᵀ(L + diag(0, Y*))V − P̄_sᵀ ln V_s − P*ᵀ ln V_l` and
//! `𝓜(V) = M(V) − M(V̄) − ∇M(V̄)ᵀ(V − V̄)`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::analysis::{p_star, scenario_equilibrium, EquilibriumReport};
use crate::controllers::{consensus_rhs, source_powers, ControllerParams};
use crate::error::{check_len, check_positive, GridError, Result};
use crate::loadmodel::{load_current, ZipLoadBank};
use crate::netmodel::{build_laplacian, comm_laplacian, ConductanceBlocks};
use crate::simulator::{Scenario, SimulationMode, Trajectory};

#[derive(Debug, Clone)]
pub struct LyapunovContext {
    blocks: ConductanceBlocks,
    bank: ZipLoadBank,
    params: ControllerParams,
    lc: DMatrix<f64>,
    vbar: DVector<f64>,
    pbar_s: DVector<f64>,
    /// `L + diag(0, Y*)`.
    quad: DMatrix<f64>,
    m_bar: f64,
    grad_bar: DVector<f64>,
}

impl LyapunovContext {
    /// Builds the context around `V̄`, which must be an equilibrium: its source
    /// powers have to match `C p*` to within `rel_tol` of `max |P̄_s|`.
    pub fn new(
        blocks: &ConductanceBlocks,
        bank: &ZipLoadBank,
        params: &ControllerParams,
        lc: &DMatrix<f64>,
        vbar_s: &DVector<f64>,
        vbar_l: &DVector<f64>,
        rel_tol: f64,
    ) -> Result<Self> {
        let ns = blocks.n_sources();
        let nl = blocks.n_loads();
        check_len("sharing weights C", params.n_sources(), ns)?;
        check_len("load bank", bank.len(), nl)?;
        check_len("reference source voltages", vbar_s.len(), ns)?;
        check_len("reference load voltages", vbar_l.len(), nl)?;
        check_positive("reference source voltage", vbar_s.as_slice())?;
        check_positive("reference load voltage", vbar_l.as_slice())?;
        let pbar_s = source_powers(blocks, vbar_s, vbar_l);
        let shared = params.c() * p_star(bank, params.c(), vbar_s, vbar_l)?;
        let scale = pbar_s.amax().max(shared.amax()).max(1e-300);
        let mismatch = (&pbar_s - &shared).amax();
        if mismatch > rel_tol * scale {
            return Err(GridError::InvalidParameter(format!(
                "reference point is not an equilibrium: source powers deviate from C·p* by {mismatch:e} W"
            )));
        }
        let mut quad = blocks.full();
        for k in 0..nl {
            quad[(ns + k, ns + k)] += bank.ystar()[k];
        }
        let mut vbar = DVector::zeros(ns + nl);
        vbar.rows_mut(0, ns).copy_from(vbar_s);
        vbar.rows_mut(ns, nl).copy_from(vbar_l);
        let mut ctx = Self {
            blocks: blocks.clone(),
            bank: bank.clone(),
            params: params.clone(),
            lc: lc.clone(),
            vbar,
            pbar_s,
            quad,
            m_bar: 0.0,
            grad_bar: DVector::zeros(0),
        };
        ctx.m_bar = energy_m(&ctx, &ctx.vbar)?;
        ctx.grad_bar = energy_gradient(&ctx, &ctx.vbar)?;
        Ok(ctx)
    }

    pub fn n_sources(&self) -> usize {
        self.blocks.n_sources()
    }

    pub fn vbar(&self) -> &DVector<f64> {
        &self.vbar
    }

    pub fn pbar_s(&self) -> &DVector<f64> {
        &self.pbar_s
    }

    pub fn c(&self) -> &DVector<f64> {
        self.params.c()
    }

    /// Concatenates source and load voltages.
    pub fn stack(&self, vs: &DVector<f64>, vl: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(vs.len() + vl.len());
        v.rows_mut(0, vs.len()).copy_from(vs);
        v.rows_mut(vs.len(), vl.len()).copy_from(vl);
        v
    }

    fn split(&self, v: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let ns = self.n_sources();
        let nl = self.blocks.n_loads();
        check_len("state", v.len(), ns + nl)?;
        check_positive("voltage", v.as_slice())?;
        Ok((v.rows(0, ns).into_owned(), v.rows(ns, nl).into_owned()))
    }
}

/// `M(V)`.
pub fn energy_m(ctx: &LyapunovContext, v: &DVector<f64>) -> Result<f64> {
    let (vs, vl) = ctx.split(v)?;
    let j = 0.5 * v.dot(&(&ctx.quad * v));
    let h: f64 = -ctx.pbar_s.iter().zip(vs.iter()).map(|(p, x)| p * x.ln()).sum::<f64>();
    let k: f64 = -ctx.bank.pstar().iter().zip(vl.iter()).map(|(p, x)| p * x.ln()).sum::<f64>();
    Ok(j + h + k)
}

/// `∇M(V) = (L + diag(0, Y*))V − [P̄_s/V_s; P*/V_l]`.
pub fn energy_gradient(ctx: &LyapunovContext, v: &DVector<f64>) -> Result<DVector<f64>> {
    let (vs, vl) = ctx.split(v)?;
    let ns = vs.len();
    let mut g = &ctx.quad * v;
    for i in 0..ns {
        g[i] -= ctx.pbar_s[i] / vs[i];
    }
    for k in 0..vl.len() {
        g[ns + k] -= ctx.bank.pstar()[k] / vl[k];
    }
    Ok(g)
}

/// `∇²M(V) = L + diag(0, Y*) + diag([V_s]⁻²[P̄_s], [V_l]⁻²[P*])`; equal to `∇²𝓜`.
pub fn hessian(ctx: &LyapunovContext, v: &DVector<f64>) -> Result<DMatrix<f64>> {
    let (vs, vl) = ctx.split(v)?;
    let ns = vs.len();
    let mut h = ctx.quad.clone();
    for i in 0..ns {
        h[(i, i)] += ctx.pbar_s[i] / (vs[i] * vs[i]);
    }
    for k in 0..vl.len() {
        h[(ns + k, ns + k)] += ctx.bank.pstar()[k] / (vl[k] * vl[k]);
    }
    Ok(h)
}

/// `𝓜(V)`.
pub fn bregman(ctx: &LyapunovContext, v: &DVector<f64>) -> Result<f64> {
    let m = energy_m(ctx, v)?;
    Ok(m - ctx.m_bar - ctx.grad_bar.dot(&(v - &ctx.vbar)))
}

/// Closed forms `∂𝓜/∂V_s = [V_s]⁻¹(P_s − P̄_s)` and `∂𝓜/∂V_l = (Y_l V)_l − I_l(V_l)`,
/// where `(Y_l V)_l = Yls V_s + Yll V_l` is the network current drawn at the loads.
pub fn bregman_gradient(ctx: &LyapunovContext, v: &DVector<f64>) -> Result<DVector<f64>> {
    let (vs, vl) = ctx.split(v)?;
    let ps = source_powers(&ctx.blocks, &vs, &vl);
    let gs = (ps - &ctx.pbar_s).component_div(&vs);
    let gl = ctx.blocks.load_network_currents(&vs, &vl) - load_current(&ctx.bank, &vl)?;
    Ok(ctx.stack(&gs, &gl))
}

/// `‖C V̇_s + [V_s] L_c [V_s] C⁻¹ ∂𝓜/∂V_s‖∞` with `V̇_s` from the consensus law at `V`.
///
/// Vanishes for every positive `V`, on or off the load constraint.
pub fn verify_gradient_flow(ctx: &LyapunovContext, v: &DVector<f64>) -> Result<f64> {
    let (vs, vl) = ctx.split(v)?;
    let c = ctx.params.c();
    let lhs = c.component_mul(&consensus_rhs(&ctx.blocks, &ctx.lc, &ctx.params, &vs, &vl));
    let g = bregman_gradient(ctx, v)?;
    let gs = g.rows(0, vs.len()).into_owned();
    let rhs = vs.component_mul(&(&ctx.lc * vs.component_mul(&gs).component_div(c)));
    Ok((lhs + rhs).amax())
}

/// `−P_sᵀ C⁻¹ L_c C⁻¹ P_s`, the rate of `𝓜` along consensus trajectories on the load constraint.
pub fn consensus_dissipation(c: &DVector<f64>, lc: &DMatrix<f64>, ps: &DVector<f64>) -> f64 {
    let q = ps.component_div(c);
    -q.dot(&(lc * &q))
}

/// `d𝓜/dt` at `V`. With load capacitors `cl` the load term `−∂𝓜/∂V_lᵀ C_l⁻¹ ∂𝓜/∂V_l` is added;
/// without them `V` is assumed to satisfy the load constraint.
pub fn dissipation_rate(
    ctx: &LyapunovContext,
    v: &DVector<f64>,
    cl: Option<&DVector<f64>>,
) -> Result<f64> {
    let (vs, vl) = ctx.split(v)?;
    let ps = source_powers(&ctx.blocks, &vs, &vl);
    let mut rate = consensus_dissipation(ctx.params.c(), &ctx.lc, &ps);
    if let Some(cl) = cl {
        check_len("load capacitances", cl.len(), vl.len())?;
        let g = bregman_gradient(ctx, v)?;
        let gl = g.rows(vs.len(), vl.len());
        rate -= gl.iter().zip(cl.iter()).map(|(g, c)| g * g / c).sum::<f64>();
    }
    Ok(rate)
}

/// Writes `𝓜` into every sample.
pub fn annotate(ctx: &LyapunovContext, traj: &mut Trajectory) -> Result<()> {
    for s in &mut traj.samples {
        let v = ctx.stack(&s.vs, &s.vl);
        s.m = Some(bregman(ctx, &v)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecreaseAudit {
    pub samples: usize,
    pub drift_tol: f64,
    /// Largest `𝓜(t_{k+1}) − 𝓜(t_k)`.
    pub max_increase: f64,
    pub monotone: bool,
    /// Largest analytic rate (should be ≤ 0).
    pub max_rate: f64,
    /// Roundoff allowance applied to `max_rate`.
    pub rate_margin: f64,
    pub rates_nonpositive: bool,
    /// Largest `|Δ𝓜 − ∫rate dt|` over sample intervals (trapezoidal).
    pub fd_mismatch: f64,
    /// `fd_mismatch / max(|Δ𝓜|)`.
    pub fd_relative: f64,
    pub m_initial: f64,
    pub m_final: f64,
    pub ok: bool,
}

/// Audits the decrease of `𝓜` along a consensus trajectory.
///
/// `drift_tol` bounds admissible increments between samples. The rate margin is
/// `1e-12 · (‖C⁻¹ P_s‖² ‖L_c‖ + 1)`.
pub fn decrease_audit(
    ctx: &LyapunovContext,
    traj: &Trajectory,
    cl: Option<&DVector<f64>>,
    drift_tol: f64,
) -> Result<DecreaseAudit> {
    if traj.samples.is_empty() {
        return Err(GridError::Trajectory("no samples to audit".into()));
    }
    let mut m = Vec::with_capacity(traj.samples.len());
    let mut rates = Vec::with_capacity(traj.samples.len());
    let mut margin: f64 = 0.0;
    let lc_norm = ctx.lc.amax() * ctx.lc.nrows() as f64;
    for s in &traj.samples {
        let v = ctx.stack(&s.vs, &s.vl);
        m.push(bregman(ctx, &v)?);
        rates.push(dissipation_rate(ctx, &v, cl)?);
        let q = s.ps.component_div(ctx.params.c()).norm_squared();
        margin = margin.max(1e-12 * (q * lc_norm + 1.0));
    }
    let mut max_increase = f64::NEG_INFINITY;
    let mut fd_mismatch: f64 = 0.0;
    let mut max_jump: f64 = 0.0;
    for k in 1..m.len() {
        let dm = m[k] - m[k - 1];
        max_increase = max_increase.max(dm);
        let dt = traj.samples[k].t - traj.samples[k - 1].t;
        let integral = 0.5 * (rates[k] + rates[k - 1]) * dt;
        fd_mismatch = fd_mismatch.max((dm - integral).abs());
        max_jump = max_jump.max(dm.abs());
    }
    if m.len() < 2 {
        max_increase = 0.0;
    }
    let max_rate = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let monotone = max_increase <= drift_tol;
    let rates_nonpositive = max_rate <= margin;
    Ok(DecreaseAudit {
        samples: m.len(),
        drift_tol,
        max_increase,
        monotone,
        max_rate,
        rate_margin: margin,
        rates_nonpositive,
        fd_mismatch,
        fd_relative: if max_jump > 0.0 { fd_mismatch / max_jump } else { 0.0 },
        m_initial: m[0],
        m_final: *m.last().unwrap(),
        ok: monotone && rates_nonpositive,
    })
}

impl LyapunovContext {
    /// Context around an equilibrium computed for `scenario` (its final load bank).
    pub fn for_scenario(scenario: &Scenario, eq: &EquilibriumReport) -> Result<Self> {
        let blocks = build_laplacian(&scenario.network);
        let bank = scenario.schedule()?.final_bank();
        LyapunovContext::new(
            &blocks,
            &bank,
            &scenario.params,
            &comm_laplacian(&scenario.network),
            &eq.vs(),
            &eq.vl(),
            1e-6,
        )
    }
}

/// Decrease audit of a consensus trajectory of `scenario`, restricted to the
/// part after the last load event, with drift tolerance `100 · atol · n`.
pub fn audit_scenario(scenario: &Scenario, traj: &Trajectory) -> Result<DecreaseAudit> {
    let eq = scenario_equilibrium(scenario, Some(traj.first().geomean_log))?;
    let ctx = LyapunovContext::for_scenario(scenario, &eq)?;
    let settled = traj.after(scenario.schedule()?.settled_after());
    let cl = match &scenario.mode {
        SimulationMode::Capacitive { cl } => Some(cl),
        SimulationMode::Dae => None,
    };
    let n = scenario.network.n_nodes() as f64;
    decrease_audit(&ctx, &settled, cl, 100.0 * scenario.integrator.atol * n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SublevelCheck {
    pub level: f64,
    pub rays: usize,
    /// Every probed ray from `V̄` rises above `level` before reaching the orthant boundary.
    pub bounded: bool,
    /// `𝓜` stays below `level` on the straight segment from `V̄` to `V`.
    pub segment_inside: bool,
    pub certified: bool,
}

/// Heuristic test that the sublevel set `{𝓜 ≤ 𝓜(V)}` around `V̄` is enclosed in the
/// positive orthant and contains `V`.
///
/// Probes the `2n` coordinate rays and the ray through `V`, each sampled at `steps` points
/// up to the boundary (or, for rays that never leave the orthant, out to `10 ‖V̄‖`).
pub fn sublevel_check(ctx: &LyapunovContext, v: &DVector<f64>, steps: usize) -> Result<SublevelCheck> {
    ctx.split(v)?;
    let level = bregman(ctx, v)?;
    let n = ctx.vbar.len();
    let steps = steps.max(2);
    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(2 * n + 1);
    for i in 0..n {
        for sign in [1.0, -1.0] {
            let mut d = DVector::zeros(n);
            d[i] = sign * ctx.vbar[i];
            dirs.push(d);
        }
    }
    let toward = v - &ctx.vbar;
    if toward.amax() > 0.0 {
        dirs.push(toward.clone());
    }
    let reach = 10.0 * ctx.vbar.norm();
    let mut bounded = true;
    for d in &dirs {
        let s_max = (0..n)
            .filter(|&i| d[i] < 0.0)
            .map(|i| -ctx.vbar[i] / d[i])
            .fold(f64::INFINITY, f64::min);
        let s_end = if s_max.is_finite() {
            s_max * (1.0 - 1e-9)
        } else {
            reach / d.norm()
        };
        let escapes = (1..=steps).all(|k| {
            let s = s_end * k as f64 / steps as f64;
            let p = &ctx.vbar + d * s;
            bregman(ctx, &p).map_or(true, |b| b <= level)
        });
        if escapes {
            bounded = false;
        }
    }
    let segment_inside = (1..steps).all(|k| {
        let p = &ctx.vbar + &toward * (k as f64 / steps as f64);
        bregman(ctx, &p).is_ok_and(|b| b <= level * (1.0 + 1e-12) + 1e-15)
    });
    Ok(SublevelCheck {
        level,
        rays: dirs.len(),
        bounded,
        segment_inside,
        certified: bounded && segment_inside,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::find_equilibrium;
    use crate::netmodel::{build_laplacian, comm_laplacian, Line, MicrogridNetwork};
    use approx::assert_relative_eq;

    fn t_net() -> MicrogridNetwork {
        MicrogridNetwork::new(
            2,
            1,
            vec![Line::new(0, 2, 1.0), Line::new(1, 2, 2.0)],
            vec![(0, 1)],
        )
        .unwrap()
    }

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn ctx_for(bank: ZipLoadBank) -> LyapunovContext {
        let net = t_net();
        let blocks = build_laplacian(&net);
        let params = ControllerParams::consensus(&[1.0, 2.0]).unwrap();
        let rep = find_equilibrium(&blocks, &bank, params.c(), 3.0 * 48f64.ln(), &v(&[48.0, 48.0]), None)
            .unwrap();
        LyapunovContext::new(&blocks, &bank, &params, &comm_laplacian(&net), &rep.vs(), &rep.vl(), 1e-8)
            .unwrap()
    }

    #[test]
    fn unloaded_flat_profile() {
        let ctx = ctx_for(ZipLoadBank::zeros(1));
        let flat = v(&[48.0, 48.0, 48.0]);
        assert!(energy_m(&ctx, &flat).unwrap().abs() < 1e-9);
        assert!(bregman(&ctx, &flat).unwrap().abs() < 1e-9);
    }

    #[test]
    fn quadratic_part_matches_edge_sum() {
        let ctx = ctx_for(ZipLoadBank::from_slices(&[-1.0], &[0.3], &[0.0]).unwrap());
        let x = v(&[47.0, 49.5, 46.0]);
        let logs: f64 = ctx.pbar_s()[0] * 47f64.ln() + ctx.pbar_s()[1] * 49.5f64.ln();
        let edges = 0.5 * (1.0 * (47.0f64 - 46.0).powi(2) + 2.0 * (49.5f64 - 46.0).powi(2));
        let shunt = 0.5 * 0.3 * 46.0f64.powi(2);
        assert_relative_eq!(energy_m(&ctx, &x).unwrap() + logs, edges + shunt, max_relative = 1e-12);
    }

    #[test]
    fn bregman_vanishes_at_reference() {
        let ctx = ctx_for(ZipLoadBank::from_slices(&[-1.0], &[0.05], &[-20.0]).unwrap());
        let vb = ctx.vbar().clone();
        assert!(bregman(&ctx, &vb).unwrap().abs() < 1e-9);
        assert!(bregman_gradient(&ctx, &vb).unwrap().amax() < 1e-9);
        assert!(verify_gradient_flow(&ctx, &vb).unwrap() < 1e-9);
    }

    #[test]
    fn gradient_and_hessian_match_differences() {
        let ctx = ctx_for(ZipLoadBank::from_slices(&[-1.0], &[0.05], &[-20.0]).unwrap());
        let x = v(&[48.7, 47.2, 46.1]);
        let g = bregman_gradient(&ctx, &x).unwrap();
        let h = hessian(&ctx, &x).unwrap();
        for j in 0..3 {
            let d = 1e-5;
            let mut up = x.clone();
            let mut dn = x.clone();
            up[j] += d;
            dn[j] -= d;
            let fd = (bregman(&ctx, &up).unwrap() - bregman(&ctx, &dn).unwrap()) / (2.0 * d);
            assert!((fd - g[j]).abs() < 1e-6 * (1.0 + g[j].abs()), "{fd} vs {}", g[j]);
            let col = (energy_gradient(&ctx, &up).unwrap() - energy_gradient(&ctx, &dn).unwrap()) / (2.0 * d);
            for i in 0..3 {
                assert!((col[i] - h[(i, j)]).abs() <= 1e-5 * (1.0 + h[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn rejects_non_equilibrium_reference() {
        let net = t_net();
        let blocks = build_laplacian(&net);
        let bank = ZipLoadBank::from_slices(&[-1.0], &[0.0], &[0.0]).unwrap();
        let params = ControllerParams::consensus(&[1.0, 1.0]).unwrap();
        let err = LyapunovContext::new(
            &blocks,
            &bank,
            &params,
            &comm_laplacian(&net),
            &v(&[50.0, 46.0]),
            &v(&[47.0]),
            1e-8,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rate_is_a_negative_quadratic_form() {
        let lc = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        let c = v(&[1.0, 2.0, 1.0]);
        for ps in [v(&[1.0, 5.0, -3.0]), v(&[2.0, 4.0, 2.0])] {
            let r = consensus_dissipation(&c, &lc, &ps);
            let q = ps.component_div(&c);
            let edge_sum = (q[0] - q[1]).powi(2) + (q[1] - q[2]).powi(2);
            assert_relative_eq!(r, -edge_sum, max_relative = 1e-14);
        }
    }

    #[test]
    fn sublevel_near_reference_is_certified() {
        let ctx = ctx_for(ZipLoadBank::from_slices(&[-1.0], &[0.05], &[0.0]).unwrap());
        let x = ctx.vbar() * 1.002;
        let rep = sublevel_check(&ctx, &x, 200).unwrap();
        assert!(rep.level > 0.0);
        assert!(rep.certified, "{rep:?}");
    }
}
