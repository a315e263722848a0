//! Invariants of the model checked on random networks.

use crate::{flat_geomean, random_grid, random_grid_sized, random_voltages, rng, Loads, RandomGrid};
use dcgrid::analysis::{
    check_condition, equilibrium_residuals, find_equilibrium, find_equilibrium_zi, p_star, EquilibriumReport,
};
use dcgrid::controllers::{consensus_rhs, source_powers, ControllerKind, ControllerParams};
use dcgrid::loadmodel::{load_balance_residual, solve_load_voltages, NewtonSettings, ZipLoadBank};
use dcgrid::lyapunov::{
    bregman, bregman_gradient, energy_gradient, energy_m, hessian, verify_gradient_flow, LyapunovContext,
};
use dcgrid::netmodel::{build_laplacian, comm_laplacian, Line, MicrogridNetwork};
use dcgrid::simulator::{simulate, IntegratorSettings, Scenario, SimulationMode};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn equilibrium(g: &RandomGrid) -> EquilibriumReport {
    let guess = DVector::from_element(g.n_sources(), 48.0);
    find_equilibrium(&g.blocks, &g.bank, g.c(), flat_geomean(g.c(), 48.0), &guess, None).expect("light loads solve")
}

fn context(g: &RandomGrid, eq: &EquilibriumReport) -> LyapunovContext {
    LyapunovContext::new(&g.blocks, &g.bank, &g.params, &g.lc, &eq.vs(), &eq.vl(), 1e-6).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_flow_identity_holds_everywhere(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 3, Loads::Zip { max_power: 20.0 });
        let ctx = context(&g, &equilibrium(&g));
        let mut r = rng(seed ^ 0x9e37);
        for _ in 0..10 {
            let v = random_voltages(&mut r, g.n_sources() + g.n_loads(), 45.0, 10.0);
            let res = verify_gradient_flow(&ctx, &v).unwrap();
            let vs = v.rows(0, g.n_sources()).into_owned();
            let vl = v.rows(g.n_sources(), g.n_loads()).into_owned();
            let flow = g.c().component_mul(&consensus_rhs(&g.blocks, &g.lc, &g.params, &vs, &vl));
            let scale = 1.0 + flow.amax();
            prop_assert!(res <= 1e-10 * scale, "residual {res:e} scale {scale:e}");
        }
    }

    #[test]
    fn condition_forms_agree(seed in any::<u64>(), factor in 0.0f64..40.0) {
        let g = random_grid(seed, 3, 3, Loads::Zip { max_power: 1.0 });
        let bank = g.bank.with_power_scaled(factor);
        let guess = DVector::from_element(g.n_sources(), 48.0);
        if let Ok(eq) = find_equilibrium(&g.blocks, &bank, g.c(), flat_geomean(g.c(), 48.0), &guess, None) {
            let rep = check_condition(&g.blocks, &bank, g.c(), &eq.vs(), &eq.vl()).unwrap();
            prop_assert!(rep.forms_agree, "{rep:?}");
            prop_assert_eq!(rep.schur_ok, rep.min_eig_schur > 0.0);
        }
    }

    #[test]
    fn equilibrium_characterizations_coincide(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 3, Loads::Zip { max_power: 20.0 });
        let eq = equilibrium(&g);
        let (vs, vl) = (eq.vs(), eq.vl());
        let scale = 1.0 + source_powers(&g.blocks, &vs, &vl).amax();
        // At a solution of the pinned system: zero consensus flow and zero load mismatch.
        let flow = consensus_rhs(&g.blocks, &g.lc, &g.params, &vs, &vl);
        prop_assert!(flow.amax() < 1e-9 * scale);
        prop_assert!(load_balance_residual(&g.blocks, &g.bank, &vs, &vl).unwrap().amax() < 1e-9 * scale);

        // Conversely, on the load manifold the consensus flow is a fixed linear image of
        // P_ZIP whose kernel meets P_ZIP's range only at zero.
        let mut r = rng(seed.wrapping_add(7));
        let vs = random_voltages(&mut r, g.n_sources(), 48.0, 3.0);
        let vl = solve_load_voltages(&g.blocks, &g.bank, &vs, &DVector::from_element(g.n_loads(), 47.0), &NewtonSettings::default()).unwrap();
        let (pz, iz) = equilibrium_residuals(&g.blocks, &g.bank, g.c(), &vs, &vl).unwrap();
        prop_assert!(iz.amax() < 1e-9);
        let ps = source_powers(&g.blocks, &vs, &vl);
        let pstar = p_star(&g.bank, g.c(), &vs, &vl).unwrap();
        prop_assert!((&ps - g.c() * pstar - &pz).amax() < 1e-9 * scale);
        let flow = consensus_rhs(&g.blocks, &g.lc, &g.params, &vs, &vl);
        let mapped = -(&g.lc * pz.component_div(g.c())).component_mul(&vs).component_div(g.c());
        prop_assert!((&flow - mapped).amax() < 1e-9 * (1.0 + flow.amax()));
        // Σ P_ZIP,i / V_i = 0, so P_ZIP ∝ C would force P_ZIP = 0.
        let weighted: f64 = pz.iter().zip(vs.iter()).map(|(p, v)| p / v).sum();
        prop_assert!(weighted.abs() < 1e-9 * scale);
    }

    #[test]
    fn consuming_loads_give_positive_p_star(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 4, Loads::Zip { max_power: 50.0 });
        let mut r = rng(seed ^ 3);
        let vs = random_voltages(&mut r, g.n_sources(), 40.0, 20.0);
        let vl = random_voltages(&mut r, g.n_loads(), 40.0, 20.0);
        prop_assert!(p_star(&g.bank, g.c(), &vs, &vl).unwrap() > 0.0);
    }

    #[test]
    fn bregman_positive_near_certified_equilibrium(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 3, Loads::Zi);
        let eq = equilibrium(&g);
        prop_assume!(eq.condition_ok);
        let ctx = context(&g, &eq);
        let vbar = ctx.vbar().clone();
        prop_assert!(bregman(&ctx, &vbar).unwrap().abs() < 1e-9 * (1.0 + energy_m(&ctx, &vbar).unwrap().abs()));
        prop_assert!(bregman_gradient(&ctx, &vbar).unwrap().amax() < 1e-8);
        let mut r = rng(seed ^ 11);
        for _ in 0..100 {
            let v = vbar.map(|x| x * (1.0 + r.gen_range(-0.01..0.01)));
            prop_assert!(bregman(&ctx, &v).unwrap() > 0.0);
        }
    }

    #[test]
    fn hessian_and_gradient_match_finite_differences(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 3, Loads::Zip { max_power: 20.0 });
        let ctx = context(&g, &equilibrium(&g));
        let mut r = rng(seed ^ 5);
        let v = random_voltages(&mut r, g.n_sources() + g.n_loads(), 46.0, 4.0);
        let n = v.len();
        let h = hessian(&ctx, &v).unwrap();
        let grad = energy_gradient(&ctx, &v).unwrap();
        let bg = bregman_gradient(&ctx, &v).unwrap();
        let step = 1e-4;
        for j in 0..n {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += step;
            vm[j] -= step;
            let fd_h = (energy_gradient(&ctx, &vp).unwrap() - energy_gradient(&ctx, &vm).unwrap()) / (2.0 * step);
            for i in 0..n {
                prop_assert!((fd_h[i] - h[(i, j)]).abs() <= 1e-5 * h.amax());
            }
            let fd_m = (energy_m(&ctx, &vp).unwrap() - energy_m(&ctx, &vm).unwrap()) / (2.0 * step);
            prop_assert!((fd_m - grad[j]).abs() <= 1e-5 * (1.0 + grad.amax()));
            let fd_b = (bregman(&ctx, &vp).unwrap() - bregman(&ctx, &vm).unwrap()) / (2.0 * step);
            prop_assert!((fd_b - bg[j]).abs() <= 1e-6 * (1.0 + bg.amax()) + 1e-6);
        }
    }

    #[test]
    fn zi_paths_agree(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 3, Loads::Zi);
        let target = flat_geomean(g.c(), 48.0);
        let guess = DVector::from_element(g.n_sources(), 48.0);
        let a = find_equilibrium(&g.blocks, &g.bank, g.c(), target, &guess, None).unwrap();
        let b = find_equilibrium_zi(&g.blocks, &g.bank, g.c(), target, &guess).unwrap();
        prop_assert!((a.vs() - b.vs()).amax() < 1e-9 * 48.0);
        prop_assert!((a.p_star - b.p_star).abs() < 1e-9 * (1.0 + a.p_star.abs()));
        prop_assert!(a.condition_ok, "ZI equilibria satisfy the certificate");
    }

    #[test]
    fn relabelling_sources_permutes_the_equilibrium(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 3, Loads::Zip { max_power: 10.0 });
        let ns = g.n_sources();
        prop_assume!(ns > 1);
        let eq = equilibrium(&g);
        // Reverse the source labels; loads keep theirs.
        let relabel = |i: usize| if i < ns { ns - 1 - i } else { i };
        let lines: Vec<Line> = g.network.lines().iter().map(|l| Line::new(relabel(l.from), relabel(l.to), l.conductance)).collect();
        let comm: Vec<(usize, usize)> = g.network.comm_edges().iter().map(|&(a, b)| (relabel(a), relabel(b))).collect();
        let net = MicrogridNetwork::new(ns, g.n_loads(), lines, comm).unwrap();
        let blocks = build_laplacian(&net);
        let c = DVector::from_fn(ns, |i, _| g.c()[ns - 1 - i]);
        let guess = DVector::from_element(ns, 48.0);
        let eq2 = find_equilibrium(&blocks, &g.bank, &c, flat_geomean(&c, 48.0), &guess, None).unwrap();
        for i in 0..ns {
            prop_assert!((eq.vbar_s[i] - eq2.vbar_s[ns - 1 - i]).abs() < 1e-8);
        }
        prop_assert!((eq.vl() - eq2.vl()).amax() < 1e-8);
        // The consensus flow is equivariant too.
        let lc2 = comm_laplacian(&net);
        let params2 = ControllerParams::consensus(c.as_slice()).unwrap();
        let mut r = rng(seed ^ 17);
        let vs = random_voltages(&mut r, ns, 48.0, 2.0);
        let vl = random_voltages(&mut r, g.n_loads(), 47.0, 2.0);
        let vs2 = DVector::from_fn(ns, |i, _| vs[ns - 1 - i]);
        let f1 = consensus_rhs(&g.blocks, &g.lc, &g.params, &vs, &vl);
        let f2 = consensus_rhs(&blocks, &lc2, &params2, &vs2, &vl);
        for i in 0..ns {
            prop_assert!((f1[i] - f2[ns - 1 - i]).abs() < 1e-9 * (1.0 + f1.amax()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn consensus_conserves_geomean(seed in any::<u64>()) {
        let g = random_grid(seed, 3, 3, Loads::Zip { max_power: 10.0 });
        let mut r = rng(seed ^ 13);
        let sc = Scenario {
            network: g.network.clone(),
            loads: g.bank.clone(),
            params: g.params.clone(),
            controller: ControllerKind::Consensus,
            initial_vs: random_voltages(&mut r, g.n_sources(), 48.0, 2.0),
            initial_vl: None,
            t_end: 0.2,
            events: vec![],
            integrator: IntegratorSettings::default(),
            mode: SimulationMode::Dae,
        };
        let traj = simulate(&sc).unwrap();
        let g0 = traj.first().geomean_log;
        for s in &traj.samples {
            prop_assert!((s.geomean_log - g0).abs() < 1e-10);
        }
    }
}

#[test]
fn gradient_flow_identity_on_ten_node_network() {
    let mut r = rng(2024);
    let g = random_grid_sized(&mut r, 3, 7, Loads::Zip { max_power: 15.0 });
    let ctx = context(&g, &equilibrium(&g));
    for _ in 0..200 {
        let v = random_voltages(&mut r, 10, 45.0, 10.0);
        let res = verify_gradient_flow(&ctx, &v).unwrap();
        assert!(res < 1e-10 * 1e3, "{res:e}");
    }
}

#[test]
fn capacitive_mode_approaches_dae_as_capacitance_vanishes() {
    let network = MicrogridNetwork::new(2, 1, vec![Line::new(0, 2, 1.0), Line::new(1, 2, 1.0)], vec![(0, 1)]).unwrap();
    let base = Scenario {
        network,
        loads: ZipLoadBank::from_slices(&[-1.0], &[0.05], &[-30.0]).unwrap(),
        params: ControllerParams::consensus(&[1.0, 2.0]).unwrap(),
        controller: ControllerKind::Consensus,
        initial_vs: DVector::from_vec(vec![50.0, 46.0]),
        initial_vl: None,
        t_end: 0.01,
        events: vec![],
        integrator: IntegratorSettings {
            method: dcgrid::simulator::Method::Rosenbrock23,
            ..IntegratorSettings::default()
        },
        mode: SimulationMode::Dae,
    };
    let dae = simulate(&base).unwrap();
    let mut errors = Vec::new();
    for cl in [1e-3, 1e-4, 1e-5] {
        let sc = Scenario {
            mode: SimulationMode::Capacitive { cl: DVector::from_element(1, cl) },
            ..base.clone()
        };
        let cap = simulate(&sc).unwrap();
        let err = (&cap.last().vs - &dae.last().vs).amax().max((&cap.last().vl - &dae.last().vl).amax());
        errors.push(err);
    }
    assert!(errors[1] < errors[0] && errors[2] < errors[1], "{errors:?}");
    assert!(errors[2] < 1e-3, "{errors:?}");
}

#[test]
fn equilibrium_rate_is_zero() {
    let g = random_grid(99, 3, 3, Loads::Zip { max_power: 10.0 });
    let eq = equilibrium(&g);
    let ps = source_powers(&g.blocks, &eq.vs(), &eq.vl());
    let rate = dcgrid::lyapunov::consensus_dissipation(g.c(), &g.lc, &ps);
    assert!(rate.abs() < 1e-12 * ps.amax().powi(2));
}
