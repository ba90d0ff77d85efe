//! Orchestration of configured runs: mesh and state setup, scheme runs,
//! comparisons, the critical-step table and threshold searches.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fem::{assemble, build_diffusion_field, AssembledOperator};
use crate::ionic::{model_by_name, pace_to_steady_state, NodeStateArray, SharedModel};
use crate::mesh::{assign_fibrosis, build_regular_sheet, build_truncated_sheet, select_nodes, Mesh, TissueTag};
use crate::oracles::spectral_bound;
use crate::output::{create_dir, write_json, write_text, write_vtk, write_vtk_snapshot};
use crate::postprocess::{align_and_diff, compute_apd90, compute_cv, nrmse, ScalarMap, Trace};
use crate::splitting::{run_simulation, RunOptions, Scheme, SchemeConfig, SimulationResult, Timing};
use crate::stimulus::{diastolic_threshold, Protocol, Stimulus};

pub const PRNG_NAME: &str = "ChaCha8";

/// Command-line overrides applied on top of a [`RunConfig`].
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub strict_substeps: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        if let (Some(seed), Some(f)) = (self.seed, c.fibrosis.as_mut()) {
            f.seed = seed;
        }
        if self.strict_substeps {
            c.scheme.strict_substeps = true;
        }
        c
    }
}

/// Everything a run needs before time stepping.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub mesh: Mesh,
    pub op: AssembledOperator,
    pub state: NodeStateArray,
    pub protocol: Protocol,
    pub probes: Vec<usize>,
    pub cv_probes: Option<[usize; 2]>,
    /// Seconds.
    pub assembly_time: f64,
    pub prepace_time: f64,
    pub prepace: Vec<PrepaceReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrepaceReport {
    pub model: String,
    pub beats: usize,
    pub convergence: f64,
    pub last_apd90: Option<f64>,
}

pub fn build_mesh(cfg: &RunConfig) -> Result<Mesh> {
    let m = &cfg.mesh;
    let mut mesh = match &m.file {
        Some(f) => Mesh::read_text(&cfg.resolve(f))?,
        None => {
            let (lx, ly, h) = (m.lx.unwrap_or(0.0), m.ly.unwrap_or(0.0), m.h.unwrap_or(0.0));
            build_regular_sheet(lx, ly, h, m.fiber_angle_deg.to_radians())?
        }
    };
    for region in &cfg.tag_regions {
        for n in select_nodes(&mesh, &region.region)? {
            mesh.tags[n] = region.tag;
        }
    }
    if let Some(f) = &cfg.fibrosis {
        mesh = assign_fibrosis(&mesh, f.fraction, f.seed)?;
    }
    Ok(mesh)
}

pub fn build_protocol(cfg: &RunConfig, mesh: &Mesh) -> Result<Protocol> {
    let stimuli = cfg
        .stimulus
        .iter()
        .map(|s| {
            Ok(Stimulus {
                nodes: select_nodes(mesh, &s.region)?,
                t_start: s.t_start,
                duration: s.duration,
                amplitude: s.amplitude,
                period: s.period,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let p = Protocol::new(stimuli);
    p.validate(mesh.n_nodes())?;
    Ok(p)
}

/// Initial state from each model's rest state, or from single-cell prepacing
/// when configured. Each model is paced once.
pub fn initial_state(cfg: &RunConfig, mesh: &Mesh) -> Result<(NodeStateArray, Vec<PrepaceReport>)> {
    let mut errs = Vec::new();
    let mut group_of_tag: BTreeMap<TissueTag, usize> = BTreeMap::new();
    let mut group_of_model: BTreeMap<String, usize> = BTreeMap::new();
    let mut models: Vec<SharedModel> = Vec::new();
    for tag in TissueTag::ALL {
        if mesh.count_tag(tag) == 0 {
            continue;
        }
        let Some(name) = cfg.models.get(&tag) else {
            errs.push(format!("models.{}: no model for {} tagged nodes", tag.as_str(), mesh.count_tag(tag)));
            continue;
        };
        let Some(model) = model_by_name(name) else {
            errs.push(format!("models.{}: unknown cell model '{name}'", tag.as_str()));
            continue;
        };
        let g = *group_of_model.entry(name.clone()).or_insert_with(|| {
            models.push(model);
            models.len() - 1
        });
        group_of_tag.insert(tag, g);
    }
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let mut reports = Vec::new();
    let mut initial = Vec::with_capacity(models.len());
    for m in &models {
        let spec = m.spec();
        match &cfg.prepace {
            Some(p) => {
                let r = pace_to_steady_state(
                    m.as_ref(),
                    p.cycle_length,
                    p.beats,
                    p.stim_amplitude.unwrap_or(spec.stim_amplitude),
                    p.stim_duration.unwrap_or(spec.stim_duration),
                )?;
                reports.push(PrepaceReport {
                    model: spec.name.clone(),
                    beats: p.beats,
                    convergence: r.convergence,
                    last_apd90: r.apd90.last().copied().filter(|a| a.is_finite()),
                });
                initial.push((m.clone(), r.v, r.state));
            }
            None => initial.push((m.clone(), spec.rest_v, spec.rest_state.clone())),
        }
    }
    let assignment: Vec<usize> = mesh.tags.iter().map(|t| group_of_tag[t]).collect();
    Ok((NodeStateArray::new(mesh.n_nodes(), &assignment, &initial)?, reports))
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let t0 = Instant::now();
    let mesh = build_mesh(cfg)?;
    let field = build_diffusion_field(&mesh, cfg.tissue.d0_myocyte, cfg.tissue.d0_fibrotic(), cfg.tissue.rho)?;
    let op = assemble(&mesh, &field)?;
    let assembly_time = t0.elapsed().as_secs_f64();
    let protocol = build_protocol(cfg, &mesh)?;
    let probes = cfg.output.probes.iter().map(|&p| mesh.nearest_node(p)).collect();
    let cv_probes = cfg.output.cv_probes.map(|[a, b]| [mesh.nearest_node(a), mesh.nearest_node(b)]);
    let t1 = Instant::now();
    let (state, prepace) = initial_state(cfg, &mesh)?;
    Ok(Prepared {
        mesh,
        op,
        state,
        protocol,
        probes,
        cv_probes,
        assembly_time,
        prepace_time: t1.elapsed().as_secs_f64(),
        prepace,
    })
}

pub fn run_options(cfg: &RunConfig, prep: &Prepared, workers: Option<usize>) -> RunOptions {
    let mut probes = prep.probes.clone();
    if let Some(cv) = prep.cv_probes {
        probes.extend(cv);
    }
    RunOptions {
        probes,
        lat_threshold: cfg.output.lat_threshold,
        track_apd: cfg.output.track_apd,
        snapshot_interval: cfg.output.snapshot_interval,
        workers,
        progress_every: cfg.output.progress_every,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub node: usize,
    pub x: f64,
    pub y: f64,
    pub lat: Option<f64>,
    pub apd90: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    /// All values in seconds.
    pub total: f64,
    pub assembly: f64,
    pub prepace: f64,
    pub solve: f64,
    pub reaction: f64,
    pub diffusion: f64,
    pub step_overhead: f64,
    pub output: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub version: &'static str,
    pub prng: &'static str,
    pub seed: Option<u64>,
    pub workers: usize,
    pub nodes: usize,
    pub elements: usize,
    pub os: &'static str,
    pub arch: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub dt_s: f64,
    /// Diffusion sub-steps per half step and their size.
    pub diffusion_substeps: u32,
    pub dt_diffusion: f64,
    pub k_max: Vec<u32>,
    /// `k_histogram[k]` node-steps used `k` reaction sub-steps.
    pub k_histogram: Vec<u64>,
    pub cv: Option<f64>,
    pub probes: Vec<ProbeReport>,
    pub prepace: Vec<PrepaceReport>,
    pub timing: TimingReport,
    pub metadata: Metadata,
    pub config: RunConfig,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub result: SimulationResult,
    pub report: RunReport,
}

fn probe_apd(trace: &Trace) -> Option<f64> {
    compute_apd90(trace).ok()
}

fn effective_workers(w: Option<usize>) -> usize {
    w.unwrap_or_else(rayon::current_num_threads)
}

/// Runs a prepared problem without writing anything.
pub fn execute_prepared(cfg: &RunConfig, prep: &Prepared, workers: Option<usize>) -> Result<RunOutcome> {
    let opts = run_options(cfg, prep, workers);
    let result = run_simulation(&prep.op, prep.state.clone(), &prep.protocol, &cfg.scheme, &opts)?;
    let cv = prep.cv_probes.and_then(|[a, b]| compute_cv(&result.lat, &prep.mesh, a, b).ok());
    let probes = prep
        .probes
        .iter()
        .zip(&result.traces)
        .map(|(&node, tr)| ProbeReport {
            node,
            x: prep.mesh.coords[node][0],
            y: prep.mesh.coords[node][1],
            lat: result.lat.get(node),
            apd90: probe_apd(tr),
        })
        .collect();
    let t: &Timing = &result.timing;
    let plan = &result.plan;
    let report = RunReport {
        scheme: cfg.scheme.scheme,
        dt: plan.dt,
        t_end: cfg.scheme.t_end,
        n_steps: plan.n_steps,
        dt_s: plan.dt_s,
        diffusion_substeps: plan.l,
        dt_diffusion: plan.dt_ad,
        k_max: plan.k_max.clone(),
        k_histogram: result.k_histogram.clone(),
        cv,
        probes,
        prepace: prep.prepace.clone(),
        timing: TimingReport {
            total: prep.assembly_time + prep.prepace_time + t.total,
            assembly: prep.assembly_time,
            prepace: prep.prepace_time,
            solve: t.total,
            reaction: t.reaction,
            diffusion: t.diffusion,
            step_overhead: t.overhead,
            output: 0.0,
        },
        metadata: Metadata {
            version: env!("CARGO_PKG_VERSION"),
            prng: PRNG_NAME,
            seed: cfg.fibrosis.map(|f| f.seed),
            workers: effective_workers(workers),
            nodes: prep.mesh.n_nodes(),
            elements: prep.mesh.n_elements(),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        },
        config: cfg.clone(),
    };
    Ok(RunOutcome { result, report })
}

pub fn execute(cfg: &RunConfig, ov: &Overrides) -> Result<(Prepared, RunOutcome)> {
    let cfg = ov.apply(cfg);
    let prep = prepare(&cfg)?;
    let out = execute_prepared(&cfg, &prep, ov.workers)?;
    Ok((prep, out))
}

fn trace_name(i: usize, node: usize) -> String {
    format!("probe_{i}_node_{node}.csv")
}

/// Writes traces, maps, snapshots and `report.json` into `dir`. Returns the
/// seconds spent.
pub fn write_artifacts(cfg: &RunConfig, prep: &Prepared, out: &mut RunOutcome, dir: &Path) -> Result<f64> {
    let t0 = Instant::now();
    create_dir(dir)?;
    let traces = dir.join("traces");
    create_dir(&traces)?;
    for (i, tr) in out.result.traces.iter().enumerate() {
        tr.write_csv(&traces.join(trace_name(i, tr.node)))?;
    }
    let res = &out.result;
    if cfg.output.write_maps {
        res.lat.write_csv(&prep.mesh, &dir.join("lat.csv"))?;
        let lat = masked(&res.lat);
        let mut fields: Vec<(&str, &[f64])> = vec![("LAT", &lat)];
        let apd = res.apd.as_ref().map(masked);
        if let (Some(a), Some(map)) = (&apd, &res.apd) {
            map.write_csv(&prep.mesh, &dir.join("apd90.csv"))?;
            fields.push(("APD90", a));
        }
        write_vtk(&prep.mesh, "activation maps", &fields, &dir.join("maps.vtk"))?;
    }
    if !res.snapshots.is_empty() {
        let snaps = dir.join("snapshots");
        create_dir(&snaps)?;
        let mut index = String::from("file,t_ms\n");
        for (i, s) in res.snapshots.iter().enumerate() {
            let name = format!("v_{i:05}.vtk");
            write_vtk_snapshot(&prep.mesh, &s.v, s.t, &snaps.join(&name))?;
            index.push_str(&format!("{name},{}\n", s.t));
        }
        write_text(&snaps.join("index.csv"), &index)?;
    }
    let dt = t0.elapsed().as_secs_f64();
    out.report.timing.output = dt;
    out.report.timing.total += dt;
    write_json(&dir.join("report.json"), &out.report)?;
    Ok(dt)
}

fn masked(m: &ScalarMap) -> Vec<f64> {
    (0..m.len()).map(|i| m.get(i).unwrap_or(f64::NAN)).collect()
}

/// One row of the critical diffusion step table.
#[derive(Debug, Clone, Serialize)]
pub struct DtsRow {
    pub h: f64,
    pub nodes: usize,
    pub elements: usize,
    pub dt_s: f64,
    /// Forward Euler limit `2 / lambda_max` from power iteration.
    pub spectral_step: Option<f64>,
}

/// Assembles a truncated sheet (`floor(l / h)` cells per axis) for every
/// configured spacing and reports the Gershgorin step.
pub fn dts_table(cfg: &RunConfig) -> Result<Vec<DtsRow>> {
    let d = cfg
        .dts
        .as_ref()
        .ok_or_else(|| Error::invalid("dts: section missing from config"))?;
    let (lx, ly) = match (cfg.mesh.lx, cfg.mesh.ly) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::invalid("dts: needs mesh.lx and mesh.ly")),
    };
    d.spacings
        .iter()
        .map(|&h| {
            let mut mesh = build_truncated_sheet(lx, ly, h, cfg.mesh.fiber_angle_deg.to_radians())?;
            if let Some(f) = &cfg.fibrosis {
                mesh = assign_fibrosis(&mesh, f.fraction, f.seed)?;
            }
            let field = build_diffusion_field(&mesh, cfg.tissue.d0_myocyte, cfg.tissue.d0_fibrotic(), cfg.tissue.rho)?;
            let op = assemble(&mesh, &field)?;
            let spectral_step = if d.spectral { Some(spectral_bound(&op)?.critical_step) } else { None };
            Ok(DtsRow {
                h,
                nodes: mesh.n_nodes(),
                elements: mesh.n_elements(),
                dt_s: op.dt_s,
                spectral_step,
            })
        })
        .collect()
}

pub fn dts_csv(rows: &[DtsRow]) -> String {
    let mut s = String::from("h_cm,nodes,elements,dt_s_ms,spectral_step_ms\n");
    for r in rows {
        let sp = r.spectral_step.map(|x| x.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{},{}\n", r.h, r.nodes, r.elements, r.dt_s, sp));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub dt: f64,
    pub wall_time: f64,
    pub reaction_time: f64,
    pub diffusion_time: f64,
    pub cv: Option<f64>,
    pub apd90: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairReport {
    pub scheme: Scheme,
    pub index: usize,
    /// Aligned max |dV| per probe (mV); `None` when no AP was found.
    pub max_dv: Vec<Option<f64>>,
    pub nrmse_lat: Option<f64>,
    pub nrmse_apd: Option<f64>,
    /// wall(this scheme) / wall(reference).
    pub wall_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub reference: Scheme,
    pub reference_index: usize,
    pub probes: Vec<usize>,
    pub schemes: Vec<SchemeSummary>,
    pub versus_reference: Vec<PairReport>,
    pub dt_s: f64,
    pub config: RunConfig,
}

/// Same problem under each configured scheme.
pub fn compare(cfg: &RunConfig, ov: &Overrides) -> Result<(Prepared, Vec<RunOutcome>, CompareReport)> {
    let cfg = ov.apply(cfg);
    let c = cfg
        .compare
        .clone()
        .ok_or_else(|| Error::invalid("compare: section missing from config"))?;
    let prep = prepare(&cfg)?;
    let mut outcomes = Vec::new();
    for &s in &c.schemes {
        let mut run_cfg = cfg.clone();
        run_cfg.scheme = SchemeConfig {
            scheme: s,
            dt: c.dt.get(&s).copied().unwrap_or_else(|| s.default_dt()),
            ..cfg.scheme.clone()
        };
        log::info!("compare: running {s} at dt = {} ms", run_cfg.scheme.dt);
        outcomes.push(execute_prepared(&run_cfg, &prep, ov.workers)?);
    }
    let ri = c.schemes.iter().position(|&s| s == c.reference).unwrap_or(0);
    let n_probes = prep.probes.len();
    let summaries: Vec<SchemeSummary> = outcomes
        .iter()
        .map(|o| SchemeSummary {
            scheme: o.report.scheme,
            dt: o.report.dt,
            wall_time: o.result.timing.total,
            reaction_time: o.result.timing.reaction,
            diffusion_time: o.result.timing.diffusion,
            cv: o.report.cv,
            apd90: o.report.probes.iter().map(|p| p.apd90).collect(),
        })
        .collect();
    let reference = &outcomes[ri];
    let pairs = outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| PairReport {
            scheme: o.report.scheme,
            index: i,
            max_dv: (0..n_probes)
                .map(|p| align_and_diff(&reference.result.traces[p], &o.result.traces[p]).ok())
                .collect(),
            nrmse_lat: nrmse(&reference.result.lat, &o.result.lat).ok(),
            nrmse_apd: match (&reference.result.apd, &o.result.apd) {
                (Some(a), Some(b)) => nrmse(a, b).ok(),
                _ => None,
            },
            wall_ratio: o.result.timing.total / reference.result.timing.total,
        })
        .collect();
    let report = CompareReport {
        reference: c.reference,
        reference_index: ri,
        probes: prep.probes.clone(),
        schemes: summaries,
        versus_reference: pairs,
        dt_s: prep.op.dt_s,
        config: cfg.clone(),
    };
    Ok((prep, outcomes, report))
}

pub fn write_compare(report: &CompareReport, outcomes: &[RunOutcome], dir: &Path) -> Result<()> {
    create_dir(dir)?;
    for (i, o) in outcomes.iter().enumerate() {
        let sub = dir.join(format!("{i}_{}", o.report.scheme));
        create_dir(&sub)?;
        for (p, tr) in o.result.traces.iter().enumerate() {
            tr.write_csv(&sub.join(trace_name(p, tr.node)))?;
        }
        write_json(&sub.join("report.json"), &o.report)?;
    }
    write_json(&dir.join("compare.json"), report)
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdReport {
    pub threshold: f64,
    pub probe: usize,
    pub window: f64,
    pub evaluations: Vec<(f64, bool)>,
}

/// Lowest amplitude of the first stimulus (within 5%) that propagates to the
/// configured probe within the window after stimulus onset.
pub fn threshold_search(cfg: &RunConfig, ov: &Overrides) -> Result<ThresholdReport> {
    let cfg = ov.apply(cfg);
    let th = cfg
        .threshold
        .clone()
        .ok_or_else(|| Error::invalid("threshold: section missing from config"))?;
    let prep = prepare(&cfg)?;
    let probe = prep.mesh.nearest_node(th.probe);
    let template = prep.protocol.stimuli[0].clone();
    let mut run_cfg = cfg.clone();
    run_cfg.scheme.t_end = template.t_start + th.window;
    let opts = RunOptions {
        probes: Vec::new(),
        lat_threshold: cfg.output.lat_threshold,
        track_apd: false,
        snapshot_interval: None,
        workers: ov.workers,
        progress_every: None,
    };
    let mut evaluations = Vec::new();
    let threshold = diastolic_threshold(th.initial_guess, |amp| {
        let protocol = Protocol::new(vec![Stimulus {
            amplitude: amp,
            ..template.clone()
        }]);
        let r = run_simulation(&prep.op, prep.state.clone(), &protocol, &run_cfg.scheme, &opts)?;
        let hit = r.lat.get(probe).is_some();
        log::info!("threshold: amplitude {amp} -> {}", if hit { "propagates" } else { "fails" });
        evaluations.push((amp, hit));
        Ok(hit)
    })?;
    Ok(ThresholdReport {
        threshold,
        probe,
        window: th.window,
        evaluations,
    })
}
