//! Strang operator splitting for the monodomain equation.
//!
//! Every global step of length `dt` is `D(dt/2) R(dt) D(dt/2)`: a diffusion
//! half step of `l` explicit sub-steps, the reaction step with `k_i` forward
//! sub-steps at node `i`, and a second diffusion half step. The trailing half
//! step of one global step and the leading half step of the next together form
//! the merged step B (`2l` sub-steps); they are kept as two calls only so that
//! probes can be sampled at synchronized times `n dt`, which does not change
//! the arithmetic.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{diffusion_substep, AssembledOperator};
use crate::ionic::{model_by_name, NodeStateArray, SharedModel};
use crate::postprocess::{ApdDetector, LatDetector, ScalarMap, Trace};
use crate::stimulus::{CompiledProtocol, Protocol};

/// Nodes per rayon task in the reaction step.
const NODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Fixed steps, `k = l = 1`.
    Ost,
    /// Adaptive reaction sub-steps; the global step is capped at `dt_s`.
    Ostar,
    /// Adaptive reaction and diffusion sub-steps.
    Daeti,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Ost, Scheme::Ostar, Scheme::Daeti];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Ost => "ost",
            Scheme::Ostar => "ostar",
            Scheme::Daeti => "daeti",
        }
    }

    /// Default global step (ms).
    pub fn default_dt(self) -> f64 {
        match self {
            Scheme::Ost => 0.01,
            Scheme::Ostar | Scheme::Daeti => 0.1,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ost" => Ok(Scheme::Ost),
            "ostar" => Ok(Scheme::Ostar),
            "daeti" => Ok(Scheme::Daeti),
            other => Err(Error::invalid(format!("unknown scheme '{other}' (expected ost, ostar or daeti)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Global step (ms).
    pub dt: f64,
    /// End time (ms).
    pub t_end: f64,
    #[serde(default = "default_k0_up")]
    pub k0_up: u32,
    #[serde(default = "default_k0_down")]
    pub k0_down: u32,
    /// Use `ceil` instead of `floor` for the diffusion sub-step count so that
    /// `dt_ad <= dt_s` always holds.
    #[serde(default)]
    pub strict_substeps: bool,
    /// Probe sampling interval (ms).
    #[serde(default = "default_record_interval")]
    pub record_interval: f64,
}

fn default_k0_up() -> u32 {
    5
}

fn default_k0_down() -> u32 {
    1
}

fn default_record_interval() -> f64 {
    0.1
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, dt: f64, t_end: f64) -> Self {
        SchemeConfig {
            scheme,
            dt,
            t_end,
            k0_up: default_k0_up(),
            k0_down: default_k0_down(),
            strict_substeps: false,
            record_interval: default_record_interval(),
        }
    }

    pub fn errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            e.push(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.t_end >= self.dt && self.t_end.is_finite()) {
            e.push(format!("t_end ({}) must be finite and >= dt ({})", self.t_end, self.dt));
        }
        if self.k0_down < 1 || self.k0_up < self.k0_down {
            e.push(format!(
                "need k0_up >= k0_down >= 1, got k0_up = {}, k0_down = {}",
                self.k0_up, self.k0_down
            ));
        }
        if !(self.record_interval > 0.0 && self.record_interval.is_finite()) {
            e.push(format!("record_interval must be positive, got {}", self.record_interval));
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.errors();
        if e.is_empty() { Ok(()) } else { Err(Error::Validation(e)) }
    }
}

/// `max(1, floor(dt / dt0))`, tolerant of the rounding in ratios like 0.1/0.01.
pub fn k_max(dt: f64, dt0: f64) -> u32 {
    let r = dt / dt0;
    let f = (r * (1.0 + 1e-12)).floor();
    if f < 1.0 { 1 } else { f.min(f64::from(u32::MAX)) as u32 }
}

/// Reaction sub-step count of one node from the `dV/dt` of its previous step.
pub fn reaction_substeps(dvdt_prev: f64, cfg: &SchemeConfig, k_max: u32) -> u32 {
    if cfg.scheme == Scheme::Ost {
        return 1;
    }
    let k0 = if dvdt_prev > 0.0 { cfg.k0_up } else { cfg.k0_down };
    let raw = f64::from(k0) + dvdt_prev.abs().floor();
    if raw >= f64::from(k_max) { k_max } else { raw as u32 }
}

/// Diffusion sub-step count `l` and length `dt_ad = dt / (2 l)`. Only DAETI adapts.
pub fn diffusion_substeps(scheme: Scheme, dt: f64, dt_s: f64, strict: bool) -> (u32, f64) {
    let l = if scheme == Scheme::Daeti && dt / 2.0 > dt_s {
        let r = dt / (2.0 * dt_s);
        let l = if strict { r.ceil() } else { r.floor() };
        (l as u32).max(1)
    } else {
        1
    };
    (l, dt / (2.0 * f64::from(l)))
}

/// Resolved step sizes for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepPlan {
    pub scheme: Scheme,
    /// Global step actually used (OSTAR caps it at `dt_s`).
    pub dt: f64,
    pub n_steps: usize,
    pub l: u32,
    pub dt_ad: f64,
    pub dt_s: f64,
    /// `k_max` of each model group, in the order of the state groups.
    pub k_max: Vec<u32>,
}

impl StepPlan {
    pub fn new(cfg: &SchemeConfig, dt_s: f64, dt0: &[f64]) -> Result<Self> {
        cfg.validate()?;
        if !(dt_s > 0.0 && dt_s.is_finite()) {
            return Err(Error::invalid(format!("stable step dt_s must be positive, got {dt_s}")));
        }
        let dt = if cfg.scheme == Scheme::Ostar { cfg.dt.min(dt_s) } else { cfg.dt };
        let n_steps = (cfg.t_end / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let (l, dt_ad) = diffusion_substeps(cfg.scheme, dt, dt_s, cfg.strict_substeps);
        Ok(StepPlan {
            scheme: cfg.scheme,
            dt,
            n_steps,
            l,
            dt_ad,
            dt_s,
            k_max: dt0.iter().map(|&d| k_max(dt, d)).collect(),
        })
    }

    /// Diffusion sub-steps in one global step.
    pub fn diffusion_substeps_per_step(&self) -> u32 {
        2 * self.l
    }
}

/// A system advanced by Strang splitting.
pub trait SplitSystem {
    /// Diffusion over `dt / 2` starting at `t`.
    fn diffuse_half(&mut self, t: f64, dt: f64) -> Result<()>;
    /// Reaction over `dt` starting at `t`.
    fn react(&mut self, t: f64, dt: f64) -> Result<()>;
}

/// One global step `D(dt/2) R(dt) D(dt/2)` from `t`.
pub fn strang_advance<S: SplitSystem + ?Sized>(sys: &mut S, t: f64, dt: f64) -> Result<()> {
    sys.diffuse_half(t, dt)?;
    sys.react(t, dt)?;
    sys.diffuse_half(t + 0.5 * dt, dt)
}

/// Wall-clock split of a run, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Timing {
    pub reaction: f64,
    pub diffusion: f64,
    pub overhead: f64,
    pub total: f64,
}

impl Timing {
    pub fn reaction_share(&self) -> f64 {
        if self.total > 0.0 { self.reaction / self.total } else { 0.0 }
    }
}

/// Run-time outputs requested from [`run_simulation`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Nodes whose voltage is sampled every `record_interval`.
    pub probes: Vec<usize>,
    /// Activation threshold (mV) for the LAT map.
    pub lat_threshold: f64,
    /// Track APD90 of the first beat at every node.
    pub track_apd: bool,
    /// Store the full voltage field at (approximately) this interval.
    pub snapshot_interval: Option<f64>,
    /// Rayon worker count; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Emit a progress line every this many global steps.
    pub progress_every: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub t: f64,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    pub plan: StepPlan,
    pub t_final: f64,
    pub traces: Vec<Trace>,
    pub lat: ScalarMap,
    pub apd: Option<ScalarMap>,
    pub snapshots: Vec<Snapshot>,
    pub timing: Timing,
    /// `k_histogram[k]` = number of node-steps that used `k` reaction sub-steps.
    pub k_histogram: Vec<u64>,
    pub final_state: NodeStateArray,
}

/// The monodomain system on an assembled mesh.
pub struct Simulation<'a> {
    op: &'a AssembledOperator,
    models: Vec<SharedModel>,
    protocol: CompiledProtocol,
    cfg: SchemeConfig,
    plan: StepPlan,
    pub state: NodeStateArray,
    scratch: Vec<f64>,
    k_histogram: Vec<u64>,
    gather: Vec<Vec<(f64, f64, u32)>>,
    reaction_time: f64,
    diffusion_time: f64,
}

/// Looks up the registered model of every state group.
pub fn resolve_models(state: &NodeStateArray) -> Result<Vec<SharedModel>> {
    state
        .groups
        .iter()
        .map(|g| model_by_name(&g.model).ok_or_else(|| Error::invalid(format!("unknown cell model '{}'", g.model))))
        .collect()
}

impl<'a> Simulation<'a> {
    /// `models[g]` integrates state group `g`.
    pub fn new(
        op: &'a AssembledOperator,
        models: Vec<SharedModel>,
        state: NodeStateArray,
        protocol: &Protocol,
        cfg: &SchemeConfig,
    ) -> Result<Self> {
        let n = op.n();
        let mut errs = cfg.errors();
        if state.n_nodes() != n {
            errs.push(format!("state has {} nodes, operator has {n}", state.n_nodes()));
        }
        if models.len() != state.groups.len() {
            errs.push(format!("{} models for {} state groups", models.len(), state.groups.len()));
        }
        for (g, m) in state.groups.iter().zip(&models) {
            if m.spec().n_states() != g.n_states || m.spec().name != g.model {
                errs.push(format!(
                    "state group '{}' ({} states) does not match model '{}' ({} states)",
                    g.model,
                    g.n_states,
                    m.spec().name,
                    m.spec().n_states()
                ));
            }
        }
        if let Err(Error::Validation(e)) = protocol.validate(n) {
            errs.extend(e);
        }
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let dt0: Vec<f64> = models.iter().map(|m| m.spec().dt0).collect();
        let plan = StepPlan::new(cfg, op.dt_s, &dt0)?;
        let k_top = plan.k_max.iter().copied().max().unwrap_or(1) as usize;
        let gather = state.groups.iter().map(|g| Vec::with_capacity(g.nodes.len())).collect();
        Ok(Simulation {
            op,
            models,
            protocol: protocol.compile(n),
            cfg: cfg.clone(),
            plan,
            state,
            scratch: vec![0.0; n],
            k_histogram: vec![0; k_top + 1],
            gather,
            reaction_time: 0.0,
            diffusion_time: 0.0,
        })
    }

    pub fn plan(&self) -> &StepPlan {
        &self.plan
    }

    /// Forces `l` diffusion sub-steps per half step regardless of the scheme
    /// (used by fine-step reference runs).
    pub fn set_diffusion_substeps(&mut self, l: u32) {
        self.plan.l = l.max(1);
        self.plan.dt_ad = self.plan.dt / (2.0 * f64::from(self.plan.l));
    }

    pub fn k_histogram(&self) -> &[u64] {
        &self.k_histogram
    }

    /// Time of the start of global step `n`.
    pub fn step_time(&self, n: usize) -> f64 {
        n as f64 * self.plan.dt
    }

    /// Advances global step `step_index` (of `plan().n_steps`).
    pub fn advance(&mut self, step_index: usize) -> Result<()> {
        let (t, dt) = (self.step_time(step_index), self.plan.dt);
        strang_advance(self, t, dt)
    }

    fn check_voltage(&self, t: f64, phase: &str) -> Result<()> {
        match self.state.v.iter().position(|x| !x.is_finite()) {
            Some(node) => Err(Error::Instability {
                node,
                time: t,
                detail: format!("non-finite voltage after {phase}"),
            }),
            None => Ok(()),
        }
    }

    /// Runs all steps, recording the requested outputs.
    pub fn run(mut self, opts: &RunOptions) -> Result<SimulationResult> {
        match opts.workers {
            Some(w) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
                pool.install(|| self.run_inner(opts))
            }
            None => self.run_inner(opts),
        }
    }

    fn run_inner(&mut self, opts: &RunOptions) -> Result<SimulationResult> {
        let n = self.state.n_nodes();
        if let Some(&bad) = opts.probes.iter().find(|&&p| p >= n) {
            return Err(Error::invalid(format!("probe node {bad} out of range ({n} nodes)")));
        }
        let start = Instant::now();
        let mut traces: Vec<Trace> = opts
            .probes
            .iter()
            .map(|&p| Trace::new(p, vec![0.0], vec![self.state.v[p]]))
            .collect();
        let mut prev_probe: Vec<f64> = opts.probes.iter().map(|&p| self.state.v[p]).collect();
        let mut lat = LatDetector::new(opts.lat_threshold, 0.0, &self.state.v);
        let mut apd = opts.track_apd.then(|| ApdDetector::new(0.0, &self.state.v));
        let mut snapshots = Vec::new();
        let mut next_snapshot = 0.0;
        if opts.snapshot_interval.is_some() {
            snapshots.push(Snapshot {
                t: 0.0,
                v: self.state.v.clone(),
            });
            next_snapshot = opts.snapshot_interval.unwrap_or(0.0);
        }
        let ri = self.cfg.record_interval;
        let mut next_record = 1usize;

        for step in 0..self.plan.n_steps {
            self.advance(step)?;
            let (t0, t1) = (self.step_time(step), self.step_time(step + 1));
            if let Some(node) = self.state.first_non_finite() {
                return Err(Error::Instability {
                    node,
                    time: t1,
                    detail: "non-finite membrane state".into(),
                });
            }
            lat.update(t1, &self.state.v);
            if let Some(a) = apd.as_mut() {
                a.update(t1, &self.state.v);
            }
            loop {
                let tr = next_record as f64 * ri;
                if tr > t1 * (1.0 + 1e-12) || tr > self.cfg.t_end * (1.0 + 1e-12) {
                    break;
                }
                let w = ((tr - t0) / (t1 - t0)).clamp(0.0, 1.0);
                for ((trace, prev), &p) in traces.iter_mut().zip(&prev_probe).zip(&opts.probes) {
                    trace.times.push(tr);
                    trace.values.push((1.0 - w) * prev + w * self.state.v[p]);
                }
                next_record += 1;
            }
            for (prev, &p) in prev_probe.iter_mut().zip(&opts.probes) {
                *prev = self.state.v[p];
            }
            if let Some(si) = opts.snapshot_interval {
                if t1 >= next_snapshot * (1.0 - 1e-12) {
                    snapshots.push(Snapshot {
                        t: t1,
                        v: self.state.v.clone(),
                    });
                    while next_snapshot <= t1 * (1.0 + 1e-12) {
                        next_snapshot += si;
                    }
                }
            }
            if let Some(every) = opts.progress_every {
                if every > 0 && (step + 1) % every == 0 {
                    log::info!(
                        "step={} t={:.3} wall_ms={:.1} reaction_ms={:.1} diffusion_ms={:.1}",
                        step + 1,
                        t1,
                        start.elapsed().as_secs_f64() * 1e3,
                        self.reaction_time * 1e3,
                        self.diffusion_time * 1e3
                    );
                }
            }
        }
        let total = start.elapsed().as_secs_f64();
        Ok(SimulationResult {
            plan: self.plan.clone(),
            t_final: self.step_time(self.plan.n_steps),
            traces,
            lat: lat.finish(),
            apd: apd.map(|a| a.finish()),
            snapshots,
            timing: Timing {
                reaction: self.reaction_time,
                diffusion: self.diffusion_time,
                overhead: (total - self.reaction_time - self.diffusion_time).max(0.0),
                total,
            },
            k_histogram: self.k_histogram.clone(),
            final_state: self.state.clone(),
        })
    }
}

impl SplitSystem for Simulation<'_> {
    fn diffuse_half(&mut self, t: f64, _dt: f64) -> Result<()> {
        let clock = Instant::now();
        for _ in 0..self.plan.l {
            diffusion_substep(self.op, &self.state.v, &mut self.scratch, self.plan.dt_ad);
            std::mem::swap(&mut self.state.v, &mut self.scratch);
        }
        self.diffusion_time += clock.elapsed().as_secs_f64();
        self.check_voltage(t, "diffusion")
    }

    fn react(&mut self, t: f64, dt: f64) -> Result<()> {
        let clock = Instant::now();
        let cfg = &self.cfg;
        let protocol = &self.protocol;
        let mut bad: Option<usize> = None;
        let NodeStateArray { v: volt, last_dvdt, groups } = &mut self.state;
        for (g, group) in groups.iter_mut().enumerate() {
            let model = self.models[g].as_ref();
            let k_max = self.plan.k_max[g];
            let ns = group.n_states;
            let local = &mut self.gather[g];
            local.clear();
            local.extend(group.nodes.iter().map(|&i| (volt[i], last_dvdt[i], 0u32)));
            let first_bad = group
                .states
                .par_chunks_mut(ns)
                .zip(local.par_iter_mut())
                .zip(group.nodes.par_iter())
                .with_min_len(NODE_CHUNK)
                .map_init(
                    || vec![0.0; ns],
                    |scratch, ((s, (v, dvdt, k_used)), &node)| {
                        let k = reaction_substeps(*dvdt, cfg, k_max);
                        let dt_ar = dt / f64::from(k);
                        for j in 0..k {
                            let tj = t + f64::from(j) * dt_ar;
                            *dvdt = model.step(v, s, dt_ar, protocol.current(node, tj), scratch);
                        }
                        *k_used = k;
                        (!(v.is_finite() && s.iter().all(|x| x.is_finite()))).then_some(node)
                    },
                )
                .flatten()
                .min();
            if let Some(node) = first_bad {
                bad = Some(bad.map_or(node, |b| b.min(node)));
            }
            for (&i, &(v, dvdt, k)) in group.nodes.iter().zip(local.iter()) {
                volt[i] = v;
                last_dvdt[i] = dvdt;
                self.k_histogram[k as usize] += 1;
            }
        }
        self.reaction_time += clock.elapsed().as_secs_f64();
        match bad {
            Some(node) => Err(Error::Instability {
                node,
                time: t + dt,
                detail: "non-finite state after reaction step".into(),
            }),
            None => Ok(()),
        }
    }
}

/// Builds a [`Simulation`] with registry models and runs it.
pub fn run_simulation(
    op: &AssembledOperator,
    state: NodeStateArray,
    protocol: &Protocol,
    cfg: &SchemeConfig,
    opts: &RunOptions,
) -> Result<SimulationResult> {
    let models = resolve_models(&state)?;
    Simulation::new(op, models, state, protocol, cfg)?.run(opts)
}
