use std::sync::Arc;

use monodomain_core::fem::{assemble, build_diffusion_field, AssembledOperator};
use monodomain_core::ionic::{model_by_name, NodeStateArray, SharedModel};
use monodomain_core::mesh::{build_regular_sheet, Mesh};
use monodomain_core::oracles::LinearDecay;
use monodomain_core::splitting::{
    k_max, reaction_substeps, run_simulation, RunOptions, Scheme, SchemeConfig, Simulation,
};
use monodomain_core::stimulus::{Protocol, Stimulus};

fn sheet(lx: f64, ly: f64, h: f64, d: f64) -> (Mesh, AssembledOperator) {
    let mesh = build_regular_sheet(lx, ly, h, 0.0).unwrap();
    let field = build_diffusion_field(&mesh, d, d, 0.25).unwrap();
    let op = assemble(&mesh, &field).unwrap();
    (mesh, op)
}

fn uniform_state(n: usize, model: &SharedModel) -> NodeStateArray {
    let s = model.spec();
    NodeStateArray::new(n, &vec![0; n], &[(model.clone(), s.rest_v, s.rest_state.clone())]).unwrap()
}

fn left_edge(mesh: &Mesh, x: f64, t_start: f64, amplitude: f64) -> Protocol {
    let nodes = (0..mesh.n_nodes()).filter(|&i| mesh.coords[i][0] <= x + 1e-9).collect();
    Protocol::new(vec![Stimulus {
        nodes,
        t_start,
        duration: 2.0,
        amplitude,
        period: None,
    }])
}

#[test]
fn zero_diffusion_is_single_cell_integration() {
    let (mesh, mut op) = sheet(0.1, 0.1, 0.05, 0.001);
    op.stiffness.scale(0.0);
    let model = model_by_name("aliev_panfilov").unwrap();
    let protocol = left_edge(&mesh, 0.0, 1.0, 50.0);
    let mut cfg = SchemeConfig::new(Scheme::Daeti, 0.5, 60.0);
    cfg.record_interval = cfg.dt;
    let res = run_simulation(
        &op,
        uniform_state(mesh.n_nodes(), &model),
        &protocol,
        &cfg,
        &RunOptions { probes: vec![0, 8], ..Default::default() },
    )
    .unwrap();

    let spec = model.spec();
    let km = k_max(cfg.dt, spec.dt0);
    for (trace, stimulated) in res.traces.iter().zip([true, false]) {
        let (mut v, mut s, mut dvdt) = (spec.rest_v, spec.rest_state.clone(), 0.0);
        let mut scratch = vec![0.0; s.len()];
        for n in 0..res.plan.n_steps {
            let t = n as f64 * cfg.dt;
            let k = reaction_substeps(dvdt, &cfg, km);
            let dt_ar = cfg.dt / f64::from(k);
            for j in 0..k {
                let tj = t + f64::from(j) * dt_ar;
                let stim = if stimulated && (1.0..3.0).contains(&tj) { 50.0 } else { 0.0 };
                dvdt = model.step(&mut v, &mut s, dt_ar, stim, &mut scratch);
            }
            assert_eq!(trace.values[n + 1], v, "step {n}");
        }
    }
    assert!(res.traces[0].values.iter().any(|&v| v > 0.0));
    assert!(res.traces[1].values.iter().all(|&v| v == spec.rest_v));
}

#[test]
fn pure_diffusion_conserves_weighted_mean() {
    let (mesh, op) = sheet(0.5, 0.3, 0.01, 0.0017);
    let model: SharedModel = Arc::new(LinearDecay::new(0.0, 0.1));
    let mut state = uniform_state(mesh.n_nodes(), &model);
    for (i, c) in mesh.coords.iter().enumerate() {
        state.v[i] = if c[0] < 0.1 { 20.0 } else { -80.0 } + (7.0 * c[1]).sin();
    }
    let before = op.weighted_sum(&state.v);
    for scheme in [Scheme::Ost, Scheme::Ostar, Scheme::Daeti] {
        let dt = if scheme == Scheme::Ost { 0.02 } else { 0.1 };
        let cfg = SchemeConfig::new(scheme, dt, 20.0);
        let res = Simulation::new(&op, vec![model.clone()], state.clone(), &Protocol::default(), &cfg)
            .unwrap()
            .run(&RunOptions::default())
            .unwrap();
        let after = op.weighted_sum(&res.final_state.v);
        assert!(((after - before) / before).abs() < 1e-9, "{scheme:?}: {before} -> {after}");
        let (lo, hi) = res.final_state.v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(lo >= -81.0 - 1e-9 && hi <= 21.0 + 1e-9, "maximum principle violated: [{lo}, {hi}]");
    }
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let (mesh, op) = sheet(0.6, 0.3, 0.02, 0.0017);
    let model = model_by_name("aliev_panfilov").unwrap();
    let protocol = left_edge(&mesh, 0.1, 1.0, 50.0);
    let cfg = SchemeConfig::new(Scheme::Daeti, 0.1, 40.0);
    let max = std::thread::available_parallelism().map_or(4, |n| n.get()).max(3);
    let runs: Vec<_> = [1, 2, max]
        .into_iter()
        .map(|w| {
            let opts = RunOptions {
                probes: vec![0, 50, 100],
                lat_threshold: 0.0,
                track_apd: true,
                workers: Some(w),
                ..Default::default()
            };
            run_simulation(&op, uniform_state(mesh.n_nodes(), &model), &protocol, &cfg, &opts).unwrap()
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r.final_state, runs[0].final_state);
        assert_eq!(r.lat, runs[0].lat);
        assert_eq!(r.k_histogram, runs[0].k_histogram);
        for (a, b) in r.traces.iter().zip(&runs[0].traces) {
            assert_eq!(a.values, b.values);
        }
    }
}

#[test]
fn k_histogram_of_a_paced_beat() {
    let (mesh, op) = sheet(0.2, 0.04, 0.02, 0.0017);
    let model = model_by_name("ord_epi").unwrap();
    let protocol = left_edge(&mesh, 0.2, 5.0, 80.0);
    let cfg = SchemeConfig::new(Scheme::Daeti, 0.1, 400.0);
    let res = run_simulation(&op, uniform_state(mesh.n_nodes(), &model), &protocol, &cfg, &RunOptions::default())
        .unwrap();
    let h = &res.k_histogram;
    let km = res.plan.k_max[0] as usize;
    assert_eq!(km, 10);
    assert_eq!(h.len(), km + 1);
    assert_eq!(h[0], 0);
    let total: u64 = h.iter().sum();
    assert_eq!(total, (res.plan.n_steps * mesh.n_nodes()) as u64);
    // rest and repolarization dominate; the upstroke saturates at k_max
    assert!(h[1] as f64 > 0.5 * total as f64, "{h:?}");
    assert!(h[km] > 0, "{h:?}");
    assert!(res.traces.is_empty());
}

#[test]
fn strict_mode_bounds_the_diffusion_substep() {
    let (_, op) = sheet(0.3, 0.3, 0.01, 0.0017);
    let model: SharedModel = Arc::new(LinearDecay::new(0.0, 0.1));
    for strict in [false, true] {
        let mut cfg = SchemeConfig::new(Scheme::Daeti, 0.1, 1.0);
        cfg.strict_substeps = strict;
        let sim = Simulation::new(&op, vec![model.clone()], uniform_state(op.n(), &model), &Protocol::default(), &cfg)
            .unwrap();
        let p = sim.plan();
        assert_eq!(p.dt_ad * f64::from(2 * p.l), p.dt);
        assert_eq!(p.dt_ad <= op.dt_s, strict, "strict={strict} dt_ad={} dt_s={}", p.dt_ad, op.dt_s);
    }
}

#[test]
fn stiff_model_spends_most_time_in_reaction() {
    let (mesh, op) = sheet(0.3, 0.1, 0.02, 0.0017);
    let model = model_by_name("ord_epi").unwrap();
    let protocol = left_edge(&mesh, 0.05, 1.0, 80.0);
    let cfg = SchemeConfig::new(Scheme::Daeti, 0.1, 100.0);
    let res = run_simulation(&op, uniform_state(mesh.n_nodes(), &model), &protocol, &cfg, &RunOptions::default())
        .unwrap();
    assert!(res.timing.reaction_share() > 0.5, "{:?}", res.timing);
    let t = res.timing;
    assert!((t.reaction + t.diffusion + t.overhead - t.total).abs() <= 1e-9 + 1e-6 * t.total);
}

#[test]
fn instability_is_reported_not_propagated() {
    let (mesh, op) = sheet(0.4, 0.4, 0.01, 0.0017);
    let model: SharedModel = Arc::new(LinearDecay::new(0.0, 1.0));
    let mut state = uniform_state(mesh.n_nodes(), &model);
    state.v[mesh.n_nodes() / 2] = 1.0;
    // half step of 8 dt_s is far outside the stable range
    let cfg = SchemeConfig::new(Scheme::Ost, 16.0 * op.dt_s, 50_000.0 * op.dt_s);
    let err = Simulation::new(&op, vec![model], state, &Protocol::default(), &cfg)
        .unwrap()
        .run(&RunOptions::default())
        .unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}
