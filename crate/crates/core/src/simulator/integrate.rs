//! Explicit Runge–Kutta drivers with forced step boundaries and cubic Hermite
//! dense output.

use nalgebra::{DMatrix, DVector};

use crate::error::{GridError, Result};

/// How a state component maps to a physical voltage-like quantity for error control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Coord {
    /// Component is `ln x`; errors are converted to `x · δ`.
    Log,
    Linear,
}

pub(crate) trait OdeSystem {
    fn coord(&self, index: usize) -> Coord;

    /// Right-hand side at `t` for a step that started at `step_start`.
    ///
    /// `step_start` lets instantaneous parameter jumps at a step boundary be
    /// attributed to the step that begins there.
    fn eval(&mut self, t: f64, step_start: f64, y: &DVector<f64>) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Scheme {
    Rk4 { dt: f64 },
    Dopri5 { rtol: f64, atol: f64, h_init: Option<f64> },
    /// Linearly implicit, L-stable order 2(3) pair for stiff closed loops.
    Rosenbrock23 { rtol: f64, atol: f64, h_init: Option<f64> },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct RunStats {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub rhs_evaluations: usize,
}

/// Integrates from `t = 0` to `t_end`, stepping exactly onto every breakpoint
/// and reporting the (interpolated) state at each of `samples`.
///
/// `samples` must be sorted, start at 0 and end at `t_end`.
pub(crate) fn integrate<S, F>(
    sys: &mut S,
    y0: DVector<f64>,
    t_end: f64,
    scheme: Scheme,
    breakpoints: &[f64],
    samples: &[f64],
    mut on_sample: F,
) -> Result<RunStats>
where
    S: OdeSystem,
    F: FnMut(&mut S, f64, f64, &DVector<f64>) -> Result<()>,
{
    let mut stops: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&b| b > 0.0 && b < t_end)
        .collect();
    stops.push(t_end);
    stops.sort_by(f64::total_cmp);
    stops.dedup();

    let mut stats = RunStats::default();
    let mut next_sample = 0;
    while next_sample < samples.len() && samples[next_sample] <= 0.0 {
        on_sample(sys, 0.0, 0.0, &y0)?;
        next_sample += 1;
    }

    let mut t = 0.0;
    let mut y = y0;
    // Derivative at the start of the next step, if still valid.
    let mut f_start: Option<DVector<f64>> = None;
    let mut h_adaptive: Option<f64> = None;

    for &stop in &stops {
        let segment_start = t;
        let mut k = 0usize;
        while t < stop {
            let f0 = match f_start.take() {
                Some(f) => f,
                None => {
                    stats.rhs_evaluations += 1;
                    sys.eval(t, t, &y)?
                }
            };
            // Rosenbrock stages for its own continuous extension.
            let mut stages: Option<(DVector<f64>, DVector<f64>)> = None;
            let (t1, y1, f1) = match scheme {
                Scheme::Rk4 { dt } => {
                    k += 1;
                    let mut t1 = segment_start + k as f64 * dt;
                    if t1 > stop || stop - t1 < 1e-9 * dt {
                        t1 = stop;
                    }
                    let h = t1 - t;
                    let y1 = rk4_step(sys, t, &y, &f0, h, &mut stats)?;
                    stats.rhs_evaluations += 1;
                    let f1 = sys.eval(t1, t, &y1)?;
                    stats.accepted_steps += 1;
                    (t1, y1, f1)
                }
                Scheme::Dopri5 { rtol, atol, h_init } => {
                    let h0 = match h_adaptive {
                        Some(h) => h,
                        None => h_init.unwrap_or_else(|| initial_step(sys, &y, &f0, rtol, atol, t_end)),
                    };
                    let (t1, y1, f1, h_next) =
                        dopri_adaptive(sys, t, &y, &f0, h0, stop, rtol, atol, &mut stats)?;
                    h_adaptive = Some(h_next);
                    (t1, y1, f1)
                }
                Scheme::Rosenbrock23 { rtol, atol, h_init } => {
                    let h0 = match h_adaptive {
                        Some(h) => h,
                        None => h_init.unwrap_or_else(|| initial_step(sys, &y, &f0, rtol, atol, t_end)),
                    };
                    let (t1, y1, f1, h_next, k) =
                        rosenbrock_adaptive(sys, t, &y, &f0, h0, stop, rtol, atol, &mut stats)?;
                    h_adaptive = Some(h_next);
                    stages = Some(k);
                    (t1, y1, f1)
                }
            };

            let h = t1 - t;
            while next_sample < samples.len() && samples[next_sample] <= t1 {
                let ts = samples[next_sample];
                if ts >= t1 {
                    on_sample(sys, t1, t, &y1)?;
                } else {
                    let theta = (ts - t) / h;
                    let ys = match &stages {
                        Some((k1, k2)) => rosenbrock_dense(&y, k1, k2, h, theta),
                        None => hermite(&y, &f0, &y1, &f1, h, theta),
                    };
                    on_sample(sys, ts, t, &ys)?;
                }
                next_sample += 1;
            }

            let at_stop = t1 >= stop;
            t = t1;
            y = y1;
            if !at_stop {
                f_start = Some(f1);
            }
        }
    }
    Ok(stats)
}

fn rk4_step<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
    stats: &mut RunStats,
) -> Result<DVector<f64>> {
    let k2 = sys.eval(t + 0.5 * h, t, &(y + k1 * (0.5 * h)))?;
    let k3 = sys.eval(t + 0.5 * h, t, &(y + &k2 * (0.5 * h)))?;
    let k4 = sys.eval(t + h, t, &(y + &k3 * h))?;
    stats.rhs_evaluations += 3;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

// Dormand–Prince 5(4) coefficients.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Attempts steps from `t` until one is accepted; returns `(t1, y1, f(t1, y1), h_next)`.
#[allow(clippy::too_many_arguments)]
fn dopri_adaptive<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &DVector<f64>,
    k1: &DVector<f64>,
    h_try: f64,
    stop: f64,
    rtol: f64,
    atol: f64,
    stats: &mut RunStats,
) -> Result<(f64, DVector<f64>, DVector<f64>, f64)> {
    let h_min = 1e-14 * t.abs().max(stop.abs()).max(1e-3);
    let mut h = h_try.min(stop - t);
    let mut rejected_once = false;
    loop {
        if h < h_min {
            return Err(GridError::StepUnderflow { t, h });
        }
        let mut t1 = t + h;
        if t1 > stop || stop - t1 < 1e-12 * stop.abs().max(1.0) {
            t1 = stop;
        }
        let h_step = t1 - t;
        match dopri_trial(sys, t, y, k1, h_step, stats) {
            Ok((y1, k7, err)) => {
                let norm = error_norm(sys, y, &y1, &err, rtol, atol);
                if norm <= 1.0 {
                    stats.accepted_steps += 1;
                    let mut factor = if norm == 0.0 { 5.0 } else { 0.9 * norm.powf(-0.2) };
                    factor = factor.clamp(0.2, 5.0);
                    if rejected_once {
                        factor = factor.min(1.0);
                    }
                    // A step clipped to land on `stop` should not shrink the next one.
                    let h_next = h.max(h_step) * factor;
                    return Ok((t1, y1, k7, h_next));
                }
                stats.rejected_steps += 1;
                rejected_once = true;
                h = h_step * (0.9 * norm.powf(-0.2)).clamp(0.1, 0.9);
            }
            Err(e) => {
                stats.rejected_steps += 1;
                rejected_once = true;
                h = h_step * 0.25;
                if h < h_min {
                    return Err(e);
                }
            }
        }
    }
}

/// `(t1, y1, f(t1, y1), next step, first two stages)`.
type RosStep = (f64, DVector<f64>, DVector<f64>, f64, (DVector<f64>, DVector<f64>));

/// Rosenbrock counterpart of [`dopri_adaptive`]. The Jacobian is formed by forward
/// differences once per attempted step.
#[allow(clippy::too_many_arguments)]
fn rosenbrock_adaptive<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &DVector<f64>,
    f0: &DVector<f64>,
    h_try: f64,
    stop: f64,
    rtol: f64,
    atol: f64,
    stats: &mut RunStats,
) -> Result<RosStep> {
    let h_min = 1e-14 * t.abs().max(stop.abs()).max(1e-3);
    let mut h = h_try.min(stop - t);
    let mut rejected_once = false;
    let (jac, dfdt) = jacobian(sys, t, y, f0, stop, stats)?;
    loop {
        if h < h_min {
            return Err(GridError::StepUnderflow { t, h });
        }
        let mut t1 = t + h;
        if t1 > stop || stop - t1 < 1e-12 * stop.abs().max(1.0) {
            t1 = stop;
        }
        let h_step = t1 - t;
        match rosenbrock_trial(sys, t, y, f0, &jac, &dfdt, h_step, stats) {
            Ok((y1, f2, err, stages)) => {
                let norm = error_norm(sys, y, &y1, &err, rtol, atol);
                if norm <= 1.0 {
                    stats.accepted_steps += 1;
                    let mut factor = if norm == 0.0 { 5.0 } else { 0.9 * norm.powf(-1.0 / 3.0) };
                    factor = factor.clamp(0.2, 5.0);
                    if rejected_once {
                        factor = factor.min(1.0);
                    }
                    return Ok((t1, y1, f2, h.max(h_step) * factor, stages));
                }
                stats.rejected_steps += 1;
                rejected_once = true;
                h = h_step * (0.9 * norm.powf(-1.0 / 3.0)).clamp(0.1, 0.9);
            }
            Err(e) => {
                stats.rejected_steps += 1;
                rejected_once = true;
                h = h_step * 0.25;
                if h < h_min {
                    return Err(e);
                }
            }
        }
    }
}

/// Forward-difference `∂f/∂y` and `∂f/∂t` at `(t, y)`.
fn jacobian<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &DVector<f64>,
    f0: &DVector<f64>,
    stop: f64,
    stats: &mut RunStats,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = y.len();
    let mut jac = DMatrix::zeros(n, n);
    let sqrt_eps = f64::EPSILON.sqrt();
    for j in 0..n {
        let mut yp = y.clone();
        let d = sqrt_eps * y[j].abs().max(1e-3);
        yp[j] += d;
        let d = yp[j] - y[j];
        let fp = sys.eval(t, t, &yp)?;
        jac.set_column(j, &((fp - f0) / d));
    }
    // Forward in time, but never across the next forced stop.
    let dt = (sqrt_eps * t.abs().max(1e-6)).min(0.5 * (stop - t));
    let dfdt = (sys.eval(t + dt, t, y)? - f0) / dt;
    stats.rhs_evaluations += n + 1;
    Ok((jac, dfdt))
}

type RosTrial = (DVector<f64>, DVector<f64>, DVector<f64>, (DVector<f64>, DVector<f64>));

/// Continuous extension built from the first two stages. Unlike Hermite it does
/// not amplify the end-point derivative error of stiff components.
fn rosenbrock_dense(y0: &DVector<f64>, k1: &DVector<f64>, k2: &DVector<f64>, h: f64, theta: f64) -> DVector<f64> {
    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let a = theta * (1.0 - theta) / (1.0 - 2.0 * d);
    let b = theta * (theta - 2.0 * d) / (1.0 - 2.0 * d);
    y0 + (k1 * a + k2 * b) * h
}

#[allow(clippy::too_many_arguments)]
fn rosenbrock_trial<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &DVector<f64>,
    f0: &DVector<f64>,
    jac: &DMatrix<f64>,
    dfdt: &DVector<f64>,
    h: f64,
    stats: &mut RunStats,
) -> Result<RosTrial> {
    let d = 1.0 / (2.0 + std::f64::consts::SQRT_2);
    let e32 = 6.0 + std::f64::consts::SQRT_2;
    let n = y.len();
    let w = DMatrix::identity(n, n) - jac * (h * d);
    let lu = w.lu();
    let solve = |b: DVector<f64>| lu.solve(&b).ok_or(GridError::Singular("Rosenbrock iteration matrix"));
    let k1 = solve(f0 + dfdt * (h * d))?;
    let f1 = sys.eval(t + 0.5 * h, t, &(y + &k1 * (0.5 * h)))?;
    let k2 = solve(&f1 - &k1)? + &k1;
    let y1 = y + &k2 * h;
    let f2 = sys.eval(t + h, t, &y1)?;
    let k3 = solve(&f2 - (&k2 - &f1) * e32 - (&k1 - f0) * 2.0 + dfdt * (h * d))?;
    stats.rhs_evaluations += 2;
    let err = (&k1 - &k2 * 2.0 + &k3) * (h / 6.0);
    Ok((y1, f2, err, (k1, k2)))
}

type Trial = (DVector<f64>, DVector<f64>, DVector<f64>);

fn dopri_trial<S: OdeSystem>(
    sys: &mut S,
    t: f64,
    y: &DVector<f64>,
    k1: &DVector<f64>,
    h: f64,
    stats: &mut RunStats,
) -> Result<Trial> {
    stats.rhs_evaluations += 6;
    let k2 = sys.eval(t + C2 * h, t, &(y + k1 * (h * A21)))?;
    let k3 = sys.eval(t + C3 * h, t, &(y + (k1 * A31 + &k2 * A32) * h))?;
    let k4 = sys.eval(t + C4 * h, t, &(y + (k1 * A41 + &k2 * A42 + &k3 * A43) * h))?;
    let k5 = sys.eval(
        t + C5 * h,
        t,
        &(y + (k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h),
    )?;
    let k6 = sys.eval(
        t + h,
        t,
        &(y + (k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h),
    )?;
    let y1 = y + (k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * h;
    let k7 = sys.eval(t + h, t, &y1)?;
    let err = (k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
    Ok((y1, k7, err))
}

fn physical<S: OdeSystem>(sys: &S, i: usize, y: f64) -> f64 {
    match sys.coord(i) {
        Coord::Log => y.exp(),
        Coord::Linear => y.abs(),
    }
}

/// RMS of the physical local error over `atol + rtol · |x|`.
fn error_norm<S: OdeSystem>(
    sys: &S,
    y0: &DVector<f64>,
    y1: &DVector<f64>,
    err: &DVector<f64>,
    rtol: f64,
    atol: f64,
) -> f64 {
    let n = y0.len().max(1);
    let sum: f64 = (0..y0.len())
        .map(|i| {
            let m0 = physical(sys, i, y0[i]);
            let m1 = physical(sys, i, y1[i]);
            let e = match sys.coord(i) {
                Coord::Log => err[i] * m0.max(m1),
                Coord::Linear => err[i],
            };
            let sc = atol + rtol * m0.max(m1);
            (e / sc).powi(2)
        })
        .sum();
    let norm = (sum / n as f64).sqrt();
    if norm.is_finite() {
        norm
    } else {
        f64::INFINITY
    }
}

fn initial_step<S: OdeSystem>(
    sys: &S,
    y: &DVector<f64>,
    f: &DVector<f64>,
    rtol: f64,
    atol: f64,
    span: f64,
) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..y.len() {
        let m = physical(sys, i, y[i]);
        let rate = match sys.coord(i) {
            Coord::Log => f[i] * m,
            Coord::Linear => f[i],
        };
        let sc = atol + rtol * m;
        d0 += (m / sc).powi(2);
        d1 += (rate / sc).powi(2);
    }
    let (d0, d1) = (d0.sqrt(), d1.sqrt());
    let h = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6 * span
    } else {
        0.01 * d0 / d1
    };
    h.min(span)
}

/// Cubic Hermite interpolant at fraction `theta` of a step of length `h`.
pub(crate) fn hermite(
    y0: &DVector<f64>,
    f0: &DVector<f64>,
    y1: &DVector<f64>,
    f1: &DVector<f64>,
    h: f64,
    theta: f64,
) -> DVector<f64> {
    let t2 = theta * theta;
    let t3 = t2 * theta;
    let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
    let h10 = t3 - 2.0 * t2 + theta;
    let h01 = -2.0 * t3 + 3.0 * t2;
    let h11 = t3 - t2;
    y0 * h00 + f0 * (h10 * h) + y1 * h01 + f1 * (h11 * h)
}
