//! Equilibria, the shared power level, and the equivalent-conductance stability certificate.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_len, check_positive, GridError, Result};
use crate::linalg;
use crate::loadmodel::{
    load_current, load_current_jacobian, solve_load_voltages, zi_load_voltages, NewtonSettings,
    ZipLoadBank,
};
use crate::netmodel::{build_laplacian, kron_reduce, kron_reduce_with_shunts, ConductanceBlocks};
use crate::simulator::Scenario;

/// Shared power level `p*` such that `P_s = C p*` at an equilibrium:
/// `p* = −(𝟙ᵀ I_l(V_l)) / (Σ C_i / V_i)`.
pub fn p_star(
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> Result<f64> {
    check_len("source voltages", vs.len(), c.len())?;
    check_positive("source voltage", vs.as_slice())?;
    let demand = load_current(bank, vl)?.sum();
    Ok(-demand / weighted_reciprocal_sum(c, vs))
}

fn weighted_reciprocal_sum(c: &DVector<f64>, vs: &DVector<f64>) -> f64 {
    c.iter().zip(vs.iter()).map(|(c, v)| c / v).sum()
}

/// `G = Ysl Yll⁻¹`.
fn load_gain(blocks: &ConductanceBlocks) -> Result<DMatrix<f64>> {
    Ok(linalg::solve_mat(&blocks.yll, &blocks.yls, "Yll")?.transpose())
}

/// `(P_ZIP, I_ZIP)`; a positive state is an equilibrium iff both vanish.
///
/// `P_ZIP = [V_s](Y_red V_s + Ysl Yll⁻¹ I_l(V_l)) − C p*`,
/// `I_ZIP = I_l(V_l) − Yll V_l − Yls V_s`.
pub fn equilibrium_residuals(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_len("source voltages", vs.len(), blocks.n_sources())?;
    check_len("load voltages", vl.len(), blocks.n_loads())?;
    check_len("sharing weights C", c.len(), blocks.n_sources())?;
    let yred = kron_reduce(blocks)?;
    let g = load_gain(blocks)?;
    let il = load_current(bank, vl)?;
    let ps = p_star(bank, c, vs, vl)?;
    let a = &yred * vs + &g * &il;
    let p_zip = vs.component_mul(&a) - c * ps;
    let i_zip = &il - blocks.load_network_currents(vs, vl);
    Ok((p_zip, i_zip))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    /// Verdict of the Schur-complement form.
    pub ok: bool,
    pub min_eig_schur: f64,
    pub schur_ok: bool,
    /// Smallest eigenvalue of the full equivalent conductance matrix.
    pub min_eig_yeq: f64,
    pub yeq_ok: bool,
    pub forms_agree: bool,
}

/// Positivity with the relative threshold `1e-10 · ‖M‖`.
fn positive_definite(m: &DMatrix<f64>) -> (bool, f64) {
    let sym = linalg::symmetrize(m);
    let lam = linalg::min_sym_eigenvalue(&sym);
    (lam > 1e-10 * linalg::max_abs(&sym), lam)
}

/// Equivalent conductance matrix
/// `Y + diag([V̄_s]⁻²[P̄_s], [V̄_l]⁻²[P*] + Y*)`.
pub fn equivalent_conductance(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    vbar_s: &DVector<f64>,
    vbar_l: &DVector<f64>,
    pbar_s: &DVector<f64>,
) -> DMatrix<f64> {
    let ns = blocks.n_sources();
    let mut y = blocks.full();
    for i in 0..ns {
        y[(i, i)] += pbar_s[i] / (vbar_s[i] * vbar_s[i]);
    }
    for k in 0..blocks.n_loads() {
        y[(ns + k, ns + k)] += bank.pstar()[k] / (vbar_l[k] * vbar_l[k]) + bank.ystar()[k];
    }
    y
}

/// Evaluates
/// `Yll + Y* + [V̄_l]⁻²[P*] − Yls (Yss + [V̄_s]⁻²[P̄_s])⁻¹ Ysl > 0`
/// together with positivity of the full equivalent conductance matrix.
///
/// `P̄_s = C p*` is computed at the supplied point.
pub fn check_condition(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    vbar_s: &DVector<f64>,
    vbar_l: &DVector<f64>,
) -> Result<ConditionReport> {
    check_len("source voltages", vbar_s.len(), blocks.n_sources())?;
    check_len("load voltages", vbar_l.len(), blocks.n_loads())?;
    check_len("load bank", bank.len(), blocks.n_loads())?;
    check_positive("load voltage", vbar_l.as_slice())?;
    let ps = p_star(bank, c, vbar_s, vbar_l)?;
    let pbar_s = c * ps;

    let mut a = blocks.yss.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += pbar_s[i] / (vbar_s[i] * vbar_s[i]);
    }
    let ainv_ysl = linalg::solve_mat(&a, &blocks.ysl, "Yss + [V̄s]⁻²[P̄s]")?;
    let mut schur = &blocks.yll - &blocks.yls * ainv_ysl;
    for k in 0..schur.nrows() {
        schur[(k, k)] += bank.ystar()[k] + bank.pstar()[k] / (vbar_l[k] * vbar_l[k]);
    }
    let (schur_ok, min_eig_schur) = positive_definite(&schur);
    let (yeq_ok, min_eig_yeq) =
        positive_definite(&equivalent_conductance(blocks, bank, vbar_s, vbar_l, &pbar_s));
    Ok(ConditionReport {
        ok: schur_ok,
        min_eig_schur,
        schur_ok,
        min_eig_yeq,
        yeq_ok,
        forms_agree: schur_ok == yeq_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquilibriumReport {
    #[serde(rename = "Vbar_s")]
    pub vbar_s: Vec<f64>,
    #[serde(rename = "Vbar_l")]
    pub vbar_l: Vec<f64>,
    /// Shared power level (W per unit C).
    pub p_star: f64,
    #[serde(rename = "Pbar_s")]
    pub pbar_s: Vec<f64>,
    /// `‖P_ZIP‖∞` (W).
    pub residual_p: f64,
    /// `‖I_ZIP‖∞` (A).
    pub residual_i: f64,
    pub geomean_log: f64,
    pub iterations: usize,
    pub condition_ok: bool,
    pub min_eig_schur: f64,
    pub condition: ConditionReport,
}

impl EquilibriumReport {
    pub fn vs(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.vbar_s)
    }

    pub fn vl(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.vbar_l)
    }

    fn build(
        blocks: &ConductanceBlocks,
        bank: &ZipLoadBank,
        c: &DVector<f64>,
        vs: &DVector<f64>,
        vl: &DVector<f64>,
        iterations: usize,
    ) -> Result<Self> {
        let (rp, ri) = equilibrium_residuals(blocks, bank, c, vs, vl)?;
        let ps = p_star(bank, c, vs, vl)?;
        let condition = check_condition(blocks, bank, c, vs, vl)?;
        Ok(Self {
            vbar_s: vs.as_slice().to_vec(),
            vbar_l: vl.as_slice().to_vec(),
            p_star: ps,
            pbar_s: (c * ps).as_slice().to_vec(),
            residual_p: linalg::inf_norm(&rp),
            residual_i: linalg::inf_norm(&ri),
            geomean_log: c.iter().zip(vs.iter()).map(|(c, v)| c * v.ln()).sum(),
            iterations,
            condition_ok: condition.ok,
            min_eig_schur: condition.min_eig_schur,
            condition,
        })
    }
}

const EQ_TOL: f64 = 1e-10;
const EQ_MAX_ITER: usize = 100;

/// Residual of the pinned square system: `P_ZIP` with its last row replaced by
/// `Σ C ln V_s − target`, stacked over `I_ZIP`.
struct PinnedSystem<'a> {
    blocks: &'a ConductanceBlocks,
    bank: &'a ZipLoadBank,
    c: &'a DVector<f64>,
    target: f64,
    yred: DMatrix<f64>,
    g: DMatrix<f64>,
}

impl PinnedSystem<'_> {
    fn residual(&self, vs: &DVector<f64>, vl: &DVector<f64>) -> Result<DVector<f64>> {
        let ns = vs.len();
        let il = load_current(self.bank, vl)?;
        let w = weighted_reciprocal_sum(self.c, vs);
        let ps = -il.sum() / w;
        let a = &self.yred * vs + &self.g * &il;
        let mut f = DVector::zeros(ns + vl.len());
        for i in 0..ns {
            f[i] = vs[i] * a[i] - self.c[i] * ps;
        }
        f[ns - 1] = self.c.iter().zip(vs.iter()).map(|(c, v)| c * v.ln()).sum::<f64>() - self.target;
        let i_zip = &il - self.blocks.load_network_currents(vs, vl);
        f.rows_mut(ns, vl.len()).copy_from(&i_zip);
        Ok(f)
    }

    fn jacobian(&self, vs: &DVector<f64>, vl: &DVector<f64>) -> Result<DMatrix<f64>> {
        let ns = vs.len();
        let nl = vl.len();
        let il = load_current(self.bank, vl)?;
        let jl = load_current_jacobian(self.bank, vl)?;
        let w = weighted_reciprocal_sum(self.c, vs);
        let s = il.sum();
        let a = &self.yred * vs + &self.g * &il;
        let dp_dvs = DVector::from_fn(ns, |j, _| -s * self.c[j] / (w * w * vs[j] * vs[j]));
        let dp_dvl = DVector::from_fn(nl, |k, _| -jl[k] / w);

        let mut jac = DMatrix::zeros(ns + nl, ns + nl);
        for i in 0..ns {
            for j in 0..ns {
                let delta = if i == j { a[i] } else { 0.0 };
                jac[(i, j)] = delta + vs[i] * self.yred[(i, j)] - self.c[i] * dp_dvs[j];
            }
            for k in 0..nl {
                jac[(i, ns + k)] = vs[i] * self.g[(i, k)] * jl[k] - self.c[i] * dp_dvl[k];
            }
        }
        for j in 0..ns {
            jac[(ns - 1, j)] = self.c[j] / vs[j];
        }
        for k in 0..nl {
            jac[(ns - 1, ns + k)] = 0.0;
        }
        for k in 0..nl {
            for j in 0..ns {
                jac[(ns + k, j)] = -self.blocks.yls[(k, j)];
            }
            for m in 0..nl {
                jac[(ns + k, ns + m)] = -self.blocks.yll[(k, m)];
            }
            jac[(ns + k, ns + k)] += jl[k];
        }
        Ok(jac)
    }
}

/// Residual and Jacobian of the pinned equilibrium system, exposed for verification.
pub fn pinned_system(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    geomean_target: f64,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sys = PinnedSystem {
        blocks,
        bank,
        c,
        target: geomean_target,
        yred: kron_reduce(blocks)?,
        g: load_gain(blocks)?,
    };
    Ok((sys.residual(vs, vl)?, sys.jacobian(vs, vl)?))
}

/// Solves for the equilibrium on the level set `Σ C_i ln V_i = geomean_target`.
///
/// Without `guess_vl` the load voltages are seeded from the load-flow solution at
/// `guess_vs` (or the ZI closed form if that fails).
pub fn find_equilibrium(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    geomean_target: f64,
    guess_vs: &DVector<f64>,
    guess_vl: Option<&DVector<f64>>,
) -> Result<EquilibriumReport> {
    let ns = blocks.n_sources();
    let nl = blocks.n_loads();
    check_len("sharing weights C", c.len(), ns)?;
    check_positive("sharing weight", c.as_slice())?;
    check_len("load bank", bank.len(), nl)?;
    check_len("source-voltage guess", guess_vs.len(), ns)?;
    check_positive("source-voltage guess", guess_vs.as_slice())?;
    if !geomean_target.is_finite() {
        return Err(GridError::InvalidParameter("geometric-mean target must be finite".into()));
    }

    let vl0 = match guess_vl {
        Some(v) => {
            check_len("load-voltage guess", v.len(), nl)?;
            check_positive("load-voltage guess", v.as_slice())?;
            v.clone()
        }
        None => seed_load_voltages(blocks, bank, guess_vs)?,
    };

    let sys = PinnedSystem {
        blocks,
        bank,
        c,
        target: geomean_target,
        yred: kron_reduce(blocks)?,
        g: load_gain(blocks)?,
    };
    let mut vs = guess_vs.clone();
    let mut vl = vl0;
    let mut f = sys.residual(&vs, &vl)?;
    let mut norm = linalg::inf_norm(&f);
    let mut history = vec![norm];
    let scale = 1.0 + c.amax() * vs.amax();
    let mut polished = false;

    for iteration in 0..=EQ_MAX_ITER {
        // One extra Newton step after reaching the tolerance takes the error to roundoff.
        if norm <= EQ_TOL * scale && (polished || norm == 0.0) {
            return EquilibriumReport::build(blocks, bank, c, &vs, &vl, iteration);
        }
        polished = norm <= EQ_TOL * scale;
        if iteration == EQ_MAX_ITER {
            break;
        }
        let jac = sys.jacobian(&vs, &vl)?;
        let step = match linalg::solve(&jac, &(-&f), "equilibrium Jacobian") {
            Ok(s) => s,
            Err(_) => break,
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1e-12 {
            let cs = &vs + step.rows(0, ns) * alpha;
            let cl = &vl + step.rows(ns, nl) * alpha;
            if cs.iter().chain(cl.iter()).all(|&v| v > 0.0) {
                let fc = sys.residual(&cs, &cl)?;
                let nc = linalg::inf_norm(&fc);
                if nc < norm {
                    vs = cs;
                    vl = cl;
                    f = fc;
                    norm = nc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        history.push(norm);
        if !accepted {
            // Stagnation at roundoff level still counts as converged.
            if norm <= 1e-3 * EQ_TOL.sqrt() * scale {
                return EquilibriumReport::build(blocks, bank, c, &vs, &vl, iteration + 1);
            }
            break;
        }
    }
    Err(GridError::EquilibriumSolve {
        iterations: history.len() - 1,
        history,
    })
}

fn seed_load_voltages(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    vs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let zi = zi_load_voltages(blocks, &bank.without_power(), vs)?;
    if bank.is_zi() {
        return Ok(zi.map(|v| v.max(1e-3)));
    }
    let guess = zi.map(|v| v.max(1e-3));
    Ok(solve_load_voltages(blocks, bank, vs, &guess, &NewtonSettings::default()).unwrap_or(guess))
}

/// Shared power level for ZI loads with the closed-form load voltages substituted:
/// `p* = −𝟙ᵀ(I* − Y*(Yll + Y*)⁻¹(I* − Yls V_s)) / (Σ C_i / V_i)`.
pub fn p_star_zi(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    vs: &DVector<f64>,
) -> Result<f64> {
    let vl = zi_load_voltages(blocks, bank, vs)?;
    let demand = bank.istar() - bank.ystar().component_mul(&vl);
    Ok(-demand.sum() / weighted_reciprocal_sum(c, vs))
}

/// ZI equilibrium by Newton on the source voltages alone:
/// `P_ZI(V_s) = [V_s](Ŷ_red V_s + Ysl (Yll + Y*)⁻¹ I*) − C p*` with the last row
/// pinned to the geometric mean, then `V_l = (Yll + Y*)⁻¹ (I* − Yls V_s)`.
pub fn find_equilibrium_zi(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    geomean_target: f64,
    guess_vs: &DVector<f64>,
) -> Result<EquilibriumReport> {
    if !bank.is_zi() {
        return Err(GridError::InvalidLoads(
            "closed-form equilibrium requires P* = 0".into(),
        ));
    }
    let ns = blocks.n_sources();
    check_len("sharing weights C", c.len(), ns)?;
    check_len("source-voltage guess", guess_vs.len(), ns)?;
    check_positive("source-voltage guess", guess_vs.as_slice())?;
    let yhat = kron_reduce_with_shunts(blocks, bank.ystar())?;
    let shunted = &blocks.yll + linalg::diag(bank.ystar());
    let load_term = &blocks.ysl * linalg::solve(&shunted, bank.istar(), "Yll + Y*")?;
    let residual = |vs: &DVector<f64>| -> Result<DVector<f64>> {
        let ps = p_star_zi(blocks, bank, c, vs)?;
        let mut f = vs.component_mul(&(&yhat * vs + &load_term)) - c * ps;
        f[ns - 1] = c.iter().zip(vs.iter()).map(|(c, v)| c * v.ln()).sum::<f64>() - geomean_target;
        Ok(f)
    };

    let mut vs = guess_vs.clone();
    let mut f = residual(&vs)?;
    let mut norm = linalg::inf_norm(&f);
    let mut history = vec![norm];
    let scale = 1.0 + c.amax() * vs.amax();
    let mut polished = false;
    for iteration in 0..=EQ_MAX_ITER {
        if norm <= EQ_TOL * scale && (polished || norm == 0.0) {
            let vl = zi_load_voltages(blocks, bank, &vs)?;
            check_positive("load voltage", vl.as_slice())?;
            return EquilibriumReport::build(blocks, bank, c, &vs, &vl, iteration);
        }
        polished = norm <= EQ_TOL * scale;
        if iteration == EQ_MAX_ITER {
            break;
        }
        // Central differences; the map is smooth and only n_s-dimensional.
        let mut jac = DMatrix::zeros(ns, ns);
        for j in 0..ns {
            let h = 1e-6 * vs[j];
            let mut up = vs.clone();
            let mut dn = vs.clone();
            up[j] += h;
            dn[j] -= h;
            let col = (residual(&up)? - residual(&dn)?) / (2.0 * h);
            jac.set_column(j, &col);
        }
        let Ok(step) = linalg::solve(&jac, &(-&f), "ZI Jacobian") else {
            break;
        };
        let mut alpha = 1.0;
        let mut accepted = false;
        while alpha >= 1e-12 {
            let cand = &vs + &step * alpha;
            if cand.iter().all(|&v| v > 0.0) {
                let fc = residual(&cand)?;
                let nc = linalg::inf_norm(&fc);
                if nc < norm {
                    vs = cand;
                    f = fc;
                    norm = nc;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        history.push(norm);
        if !accepted {
            if norm <= 1e-3 * EQ_TOL.sqrt() * scale {
                let vl = zi_load_voltages(blocks, bank, &vs)?;
                return EquilibriumReport::build(blocks, bank, c, &vs, &vl, iteration + 1);
            }
            break;
        }
    }
    Err(GridError::EquilibriumSolve {
        iterations: history.len() - 1,
        history,
    })
}

/// Equilibrium a scenario's consensus run should settle to: the bank after all
/// events, on the level set of the initial geometric mean unless `geomean` is given.
pub fn scenario_equilibrium(scenario: &Scenario, geomean: Option<f64>) -> Result<EquilibriumReport> {
    let blocks = build_laplacian(&scenario.network);
    let bank = scenario.schedule()?.final_bank();
    let target = geomean.unwrap_or_else(|| scenario.initial_geomean_log());
    let c = scenario.params.c();
    // Start from the initial voltages rescaled onto the target level set.
    let shift = ((target - scenario.initial_geomean_log()) / c.sum()).exp();
    let guess = &scenario.initial_vs * shift;
    find_equilibrium(&blocks, &bank, c, target, &guess, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VoltageInequality {
    /// `Σ_loads a_i / V_i` with `a_i = P*_i / Σ P*`.
    pub lhs: f64,
    /// `Σ_sources b_i / V_i` with `b_i = C_i / Σ C`.
    pub rhs: f64,
    pub holds: bool,
}

/// Average voltage inequality between harmonic means of load and source voltages.
pub fn voltage_inequality_check(
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    vs: &DVector<f64>,
    vl: &DVector<f64>,
) -> Result<VoltageInequality> {
    check_len("source voltages", vs.len(), c.len())?;
    check_len("load voltages", vl.len(), bank.len())?;
    check_positive("source voltage", vs.as_slice())?;
    check_positive("load voltage", vl.as_slice())?;
    let ptot = bank.pstar().sum();
    if ptot == 0.0 {
        return Err(GridError::InvalidLoads(
            "voltage inequality weights need a nonzero constant-power load".into(),
        ));
    }
    let lhs = bank.pstar().iter().zip(vl.iter()).map(|(p, v)| p / ptot / v).sum();
    let ctot = c.sum();
    let rhs = c.iter().zip(vs.iter()).map(|(ci, v)| ci / ctot / v).sum();
    Ok(VoltageInequality {
        lhs,
        rhs,
        holds: lhs >= rhs * (1.0 - 1e-14),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuarticRoots {
    /// Positive real roots of `V⁴ − r2 I V³ + c r1 I V − c² = 0`, ascending.
    pub v1: Vec<f64>,
    /// Positive real roots of `V⁴ − r1 I V³ + c r2 I V − c² = 0`, ascending.
    pub v2: Vec<f64>,
}

/// Source-voltage quartics of the two-source T network restricted to `V_1 V_2 = c`.
pub fn t_network_quartic_roots(r1: f64, r2: f64, c: f64, il: f64) -> Result<QuarticRoots> {
    if !(r1 > 0.0 && r2 > 0.0 && c > 0.0) || !il.is_finite() {
        return Err(GridError::InvalidParameter(
            "quartic needs r1, r2, c > 0 and a finite load current".into(),
        ));
    }
    let v1 = positive_quartic_roots([1.0, -r2 * il, 0.0, c * r1 * il, -c * c]);
    let v2 = positive_quartic_roots([1.0, -r1 * il, 0.0, c * r2 * il, -c * c]);
    if r1 == r2 {
        // (V² − c)(V² − r I V + c): √c is a root of both.
        let sq = c.sqrt();
        for roots in [&v1, &v2] {
            debug_assert!(roots.iter().any(|r| (r - sq).abs() <= 1e-9 * sq));
        }
    }
    Ok(QuarticRoots { v1, v2 })
}

/// Evaluates `Σ a_k V^(4−k)`.
pub fn quartic_eval(coeffs: [f64; 5], v: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &a| acc * v + a)
}

fn quartic_derivative(coeffs: [f64; 5], v: f64) -> f64 {
    4.0 * coeffs[0] * v.powi(3) + 3.0 * coeffs[1] * v * v + 2.0 * coeffs[2] * v + coeffs[3]
}

/// Real positive roots of a monic quartic via companion-matrix eigenvalues,
/// polished by Newton.
fn positive_quartic_roots(coeffs: [f64; 5]) -> Vec<f64> {
    let mut comp = DMatrix::zeros(4, 4);
    for k in 0..4 {
        comp[(0, k)] = -coeffs[k + 1] / coeffs[0];
    }
    for k in 1..4 {
        comp[(k, k - 1)] = 1.0;
    }
    let scale = coeffs.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1.0);
    let mut roots: Vec<f64> = Vec::new();
    for z in comp.complex_eigenvalues().iter() {
        let mut v = z.re;
        if z.im.abs() > 1e-6 * z.norm().max(1.0) || v <= 0.0 {
            continue;
        }
        for _ in 0..50 {
            let d = quartic_derivative(coeffs, v);
            if d == 0.0 {
                break;
            }
            let dv = quartic_eval(coeffs, v) / d;
            v -= dv;
            if dv.abs() <= 1e-15 * v.abs() {
                break;
            }
        }
        if v > 0.0 && quartic_eval(coeffs, v).abs() <= 1e-8 * scale {
            roots.push(v);
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs().max(1.0));
    roots
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    /// Multiplier applied to every `P*`.
    pub factor: f64,
    pub condition_ok: bool,
    pub min_eig_schur: f64,
    pub min_eig_yeq: f64,
    pub forms_agree: bool,
}

/// Continuation in a uniform scaling of the constant-power loads.
///
/// Each point reuses the previous equilibrium as its guess. The sweep stops at the
/// first factor where the equilibrium solve fails; the returned error is that
/// failure paired with the points computed so far.
pub fn pstar_sweep(
    blocks: &ConductanceBlocks,
    bank: &ZipLoadBank,
    c: &DVector<f64>,
    geomean_target: f64,
    guess_vs: &DVector<f64>,
    factors: &[f64],
) -> (Vec<SweepPoint>, Option<GridError>) {
    let mut points = Vec::with_capacity(factors.len());
    let mut vs = guess_vs.clone();
    let mut vl: Option<DVector<f64>> = None;
    for &factor in factors {
        let scaled = bank.with_power_scaled(factor);
        match find_equilibrium(blocks, &scaled, c, geomean_target, &vs, vl.as_ref()) {
            Ok(rep) => {
                vs = rep.vs();
                vl = Some(rep.vl());
                points.push(SweepPoint {
                    factor,
                    condition_ok: rep.condition.ok,
                    min_eig_schur: rep.condition.min_eig_schur,
                    min_eig_yeq: rep.condition.min_eig_yeq,
                    forms_agree: rep.condition.forms_agree,
                });
            }
            Err(e) => return (points, Some(e)),
        }
    }
    (points, None)
}
