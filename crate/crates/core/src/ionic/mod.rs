//! Ionic cell models and single-cell utilities.
//!
//! Units: mV, ms, and currents normalized by a membrane capacitance of
//! 1 uF/cm^2, so `-I_ion` is directly a voltage rate in mV/ms.

mod aliev_panfilov;
mod maccannell;
pub mod ohara_rudy;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{compute_apd90, Trace};

pub use aliev_panfilov::AlievPanfilov;
pub use maccannell::MacCannell;
pub use ohara_rudy::{CellType, OHaraRudy};

/// Static description of a cell model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellModelSpec {
    pub name: String,
    pub state_names: Vec<&'static str>,
    pub rest_v: f64,
    pub rest_state: Vec<f64>,
    /// Largest single-cell step (ms) the model is run at when sub-stepping
    /// the reaction; sets `k_max = floor(dt / dt0)`.
    pub dt0: f64,
    /// Bound on `|dV/dt|` (mV/ms) at the tabulated rest state.
    pub rest_tolerance: f64,
    /// Default single-cell pacing stimulus, mV/ms and ms.
    pub stim_amplitude: f64,
    pub stim_duration: f64,
}

impl CellModelSpec {
    pub fn n_states(&self) -> usize {
        self.state_names.len()
    }

    pub const CAPACITANCE: f64 = 1.0;
}

pub trait CellModel: Send + Sync + std::fmt::Debug {
    fn spec(&self) -> &CellModelSpec;

    /// Returns `dV/dt = -I_ion/C + i_stim` and writes the state derivatives.
    fn rates(&self, v: f64, s: &[f64], i_stim: f64, ds: &mut [f64]) -> f64;

    /// Advances `(v, s)` by one explicit step and returns the `dV/dt` used.
    /// The default is forward Euler on every variable.
    fn step(&self, v: &mut f64, s: &mut [f64], dt: f64, i_stim: f64, scratch: &mut [f64]) -> f64 {
        forward_euler_step(self, v, s, dt, i_stim, scratch)
    }
}

/// Plain forward Euler on every variable, regardless of [`CellModel::step`].
pub fn forward_euler_step<M: CellModel + ?Sized>(
    model: &M,
    v: &mut f64,
    s: &mut [f64],
    dt: f64,
    i_stim: f64,
    scratch: &mut [f64],
) -> f64 {
    let dv = model.rates(*v, s, i_stim, scratch);
    for (x, d) in s.iter_mut().zip(scratch.iter()) {
        *x += dt * d;
    }
    *v += dt * dv;
    dv
}

pub type SharedModel = Arc<dyn CellModel>;

/// Names accepted by [`model_by_name`].
pub const MODEL_NAMES: [&str; 5] = ["aliev_panfilov", "ord_endo", "ord_epi", "ord_mid", "maccannell"];

pub fn model_by_name(name: &str) -> Option<SharedModel> {
    let m: SharedModel = match name {
        "aliev_panfilov" => Arc::new(AlievPanfilov::new()),
        "ord_endo" => Arc::new(OHaraRudy::new(CellType::Endo)),
        "ord_epi" => Arc::new(OHaraRudy::new(CellType::Epi)),
        "ord_mid" => Arc::new(OHaraRudy::new(CellType::Mid)),
        "maccannell" => Arc::new(MacCannell::new()),
        _ => return None,
    };
    Some(m)
}

/// Convenience wrapper returning `(dV/dt, dS/dt)`.
pub fn rates(model: &dyn CellModel, v: f64, s: &[f64], i_stim: f64) -> (f64, Vec<f64>) {
    let mut ds = vec![0.0; s.len()];
    let dv = model.rates(v, s, i_stim, &mut ds);
    (dv, ds)
}

/// Per-node membrane state: voltage, last reaction `dV/dt`, and the model
/// states of each node stored contiguously per model group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStateArray {
    pub v: Vec<f64>,
    pub last_dvdt: Vec<f64>,
    pub groups: Vec<StateGroup>,
}

/// Nodes sharing one cell model; `states` is `nodes.len() * n_states` long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateGroup {
    pub model: String,
    pub n_states: usize,
    pub nodes: Vec<usize>,
    pub states: Vec<f64>,
}

impl NodeStateArray {
    /// Builds the state for `n_nodes` nodes where `assignment[i]` indexes into
    /// `initial`, a list of (model, V, states) initial conditions.
    pub fn new(n_nodes: usize, assignment: &[usize], initial: &[(SharedModel, f64, Vec<f64>)]) -> Result<Self> {
        if assignment.len() != n_nodes {
            return Err(Error::invalid("model assignment length differs from node count"));
        }
        let mut v = vec![0.0; n_nodes];
        let mut groups: Vec<StateGroup> = initial
            .iter()
            .map(|(m, _, s)| StateGroup {
                model: m.spec().name.clone(),
                n_states: s.len(),
                nodes: Vec::new(),
                states: Vec::new(),
            })
            .collect();
        for (node, &g) in assignment.iter().enumerate() {
            let (_, v0, s0) = initial
                .get(g)
                .ok_or_else(|| Error::invalid(format!("node {node} assigned to unknown model group {g}")))?;
            v[node] = *v0;
            groups[g].nodes.push(node);
            groups[g].states.extend_from_slice(s0);
        }
        groups.retain(|g| !g.nodes.is_empty());
        Ok(NodeStateArray {
            v,
            last_dvdt: vec![0.0; n_nodes],
            groups,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.v.len()
    }

    /// First node holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        if let Some(i) = self.v.iter().position(|x| !x.is_finite()) {
            return Some(i);
        }
        for g in &self.groups {
            if let Some(p) = g.states.iter().position(|x| !x.is_finite()) {
                return Some(g.nodes[p / g.n_states]);
            }
        }
        None
    }
}

/// Outcome of [`pace_to_steady_state`].
#[derive(Debug, Clone)]
pub struct PacingResult {
    pub v: f64,
    pub state: Vec<f64>,
    /// Max relative change of the end-diastolic state over the last two beats.
    pub convergence: f64,
    /// APD90 of every beat (NaN when no action potential was detected).
    pub apd90: Vec<f64>,
}

/// Integrates one cell with fixed step `dt` from `t0` to `t1`, stimulating
/// whenever `(t mod cycle) < duration`. Calls `observe(t, v, s)` after each step.
#[allow(clippy::too_many_arguments)]
fn integrate_cell(
    model: &dyn CellModel,
    v: &mut f64,
    s: &mut [f64],
    dt: f64,
    n_steps: usize,
    t0: f64,
    plain_euler: bool,
    stim: impl Fn(f64) -> f64,
    mut observe: impl FnMut(f64, f64, &[f64]) -> bool,
) -> bool {
    let mut scratch = vec![0.0; s.len()];
    for n in 0..n_steps {
        let t = t0 + n as f64 * dt;
        if plain_euler {
            forward_euler_step(model, v, s, dt, stim(t), &mut scratch);
        } else {
            model.step(v, s, dt, stim(t), &mut scratch);
        }
        if !observe(t + dt, *v, s) {
            return false;
        }
    }
    true
}

/// Paces a single cell with forward steps of `dt0 / 2` for `n_beats` cycles
/// and returns the end-diastolic state of the last beat.
pub fn pace_to_steady_state(
    model: &dyn CellModel,
    cycle_length: f64,
    n_beats: usize,
    stim_amplitude: f64,
    stim_duration: f64,
) -> Result<PacingResult> {
    pace_from(
        model,
        model.spec().rest_v,
        &model.spec().rest_state,
        cycle_length,
        n_beats,
        stim_amplitude,
        stim_duration,
    )
}

pub fn pace_from(
    model: &dyn CellModel,
    v0: f64,
    s0: &[f64],
    cycle_length: f64,
    n_beats: usize,
    stim_amplitude: f64,
    stim_duration: f64,
) -> Result<PacingResult> {
    if n_beats == 0 {
        return Err(Error::invalid("pacing needs at least one beat"));
    }
    if !(cycle_length > 0.0) {
        return Err(Error::invalid("cycle length must be positive"));
    }
    let dt = model.spec().dt0 / 2.0;
    let steps_per_beat = (cycle_length / dt).round() as usize;
    let sample_every = ((0.1 / dt).round() as usize).max(1);
    let mut v = v0;
    let mut s = s0.to_vec();
    let mut apd90 = Vec::with_capacity(n_beats);
    let mut prev_end: Option<Vec<f64>> = None;
    let mut convergence = f64::NAN;
    for beat in 0..n_beats {
        let mut trace = Trace::new(0, vec![0.0], vec![v]);
        let mut step = 0usize;
        let mut diverged = false;
        integrate_cell(
            model,
            &mut v,
            &mut s,
            dt,
            steps_per_beat,
            0.0,
            false,
            |t| if t < stim_duration { stim_amplitude } else { 0.0 },
            |t, v, _| {
                step += 1;
                if !(v.abs() <= 1000.0) {
                    diverged = true;
                    return false;
                }
                if step % sample_every == 0 {
                    trace.times.push(t);
                    trace.values.push(v);
                }
                true
            },
        );
        if diverged {
            return Err(Error::Numerical(format!(
                "{} diverged during beat {beat} of single-cell pacing",
                model.spec().name
            )));
        }
        apd90.push(compute_apd90(&trace).unwrap_or(f64::NAN));
        let mut end = vec![v];
        end.extend_from_slice(&s);
        if let Some(prev) = &prev_end {
            convergence = end
                .iter()
                .zip(prev)
                .map(|(a, b)| (a - b).abs() / b.abs().max(1e-12))
                .fold(0.0, f64::max);
        }
        prev_end = Some(end);
    }
    Ok(PacingResult {
        v,
        state: s,
        convergence,
        apd90,
    })
}

/// Whether one stimulated beat of `duration` ms integrates with plain forward
/// Euler (gates included) at step `dt` with
/// finite values and `|V| <= 200 mV`.
pub fn beat_is_stable(model: &dyn CellModel, dt: f64, duration: f64) -> bool {
    let spec = model.spec();
    let mut v = spec.rest_v;
    let mut s = spec.rest_state.clone();
    let n = (duration / dt).ceil() as usize;
    let (amp, dur) = (spec.stim_amplitude, spec.stim_duration);
    integrate_cell(
        model,
        &mut v,
        &mut s,
        dt,
        n,
        0.0,
        true,
        |t| if t < dur { amp } else { 0.0 },
        |_, v, s| v.abs() <= 200.0 && v.is_finite() && s.iter().all(|x| x.is_finite()),
    )
}

/// Bisection (in log step size, 5% relative resolution) for the largest
/// forward step that completes a paced beat stably; searched in [1e-5, 1] ms.
pub fn estimate_dt0(model: &dyn CellModel, beat_duration: f64) -> Result<f64> {
    let (mut lo, mut hi) = (1e-5_f64, 1.0_f64);
    if beat_is_stable(model, hi, beat_duration) {
        return Ok(hi);
    }
    let mut lo_checked = false;
    while hi / lo > 1.05 {
        let mid = (lo * hi).sqrt();
        if beat_is_stable(model, mid, beat_duration) {
            lo = mid;
            lo_checked = true;
        } else {
            hi = mid;
        }
    }
    if !lo_checked && !beat_is_stable(model, lo, beat_duration) {
        return Err(Error::Numerical(format!(
            "no stable step in [1e-5, 1] ms for {}",
            model.spec().name
        )));
    }
    Ok(lo)
}

/// Single-cell trace for CSV export: `t, V, selected states...`.
#[derive(Debug, Clone, Default)]
pub struct CellTrace {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Runs one cell for `duration` ms at step `dt0/2`, sampling every `interval`.
pub fn cell_trace(
    model: &dyn CellModel,
    v0: f64,
    s0: &[f64],
    duration: f64,
    interval: f64,
    stim_amplitude: f64,
    stim_duration: f64,
    states: &[&str],
) -> Result<CellTrace> {
    let spec = model.spec();
    let idx: Vec<usize> = states
        .iter()
        .map(|n| {
            spec.state_names
                .iter()
                .position(|s| s == n)
                .ok_or_else(|| Error::invalid(format!("model {} has no state `{n}`", spec.name)))
        })
        .collect::<Result<_>>()?;
    let dt = spec.dt0 / 2.0;
    let every = ((interval / dt).round() as usize).max(1);
    let mut out = CellTrace {
        columns: ["t", "V"].iter().map(|s| s.to_string()).chain(states.iter().map(|s| s.to_string())).collect(),
        rows: Vec::new(),
    };
    let row = |t: f64, v: f64, s: &[f64]| {
        let mut r = vec![t, v];
        r.extend(idx.iter().map(|&i| s[i]));
        r
    };
    out.rows.push(row(0.0, v0, s0));
    let (mut v, mut s) = (v0, s0.to_vec());
    let mut k = 0usize;
    let n = (duration / dt).round() as usize;
    integrate_cell(
        model,
        &mut v,
        &mut s,
        dt,
        n,
        0.0,
        false,
        |t| if t < stim_duration { stim_amplitude } else { 0.0 },
        |t, v, s| {
            k += 1;
            if k % every == 0 {
                out.rows.push(row(t, v, s));
            }
            v.is_finite()
        },
    );
    Ok(out)
}

impl CellTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        w.write_record(&self.columns).map_err(|e| Error::io(path, e.into()))?;
        for r in &self.rows {
            w.write_record(r.iter().map(|x| x.to_string())).map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_models() -> Vec<SharedModel> {
        MODEL_NAMES.iter().map(|n| model_by_name(n).unwrap()).collect()
    }

    #[test]
    fn registry_round_trip() {
        for m in all_models() {
            assert!(MODEL_NAMES.contains(&m.spec().name.as_str()));
            assert_eq!(m.spec().rest_state.len(), m.spec().n_states());
            assert!(m.spec().dt0 > 0.0);
        }
        assert!(model_by_name("luo_rudy").is_none());
    }

    #[test]
    fn rest_is_quasi_equilibrium() {
        for m in all_models() {
            let spec = m.spec();
            let (dv, _) = rates(m.as_ref(), spec.rest_v, &spec.rest_state, 0.0);
            let tol = spec.rest_tolerance.max(1e-3);
            assert!(dv.abs() < tol, "{}: dV/dt = {dv}", spec.name);
        }
    }

    #[test]
    fn aliev_panfilov_closed_form() {
        // u = 0.8, w = 0: du = 8 * 0.8 * 0.2 * 0.65 = 0.832 per model time unit;
        // dw = 0.002 * (-8 * 0.8 * (0.8 - 1.15)) = 0.00448.
        let m = AlievPanfilov::new();
        let (dv, ds) = rates(&m, 0.0, &[0.0], 0.0);
        assert!((dv - 100.0 * 0.832 / 12.9).abs() < 1e-12);
        assert!((ds[0] - 0.00448 / 12.9).abs() < 1e-15);
    }

    #[test]
    fn stimulus_is_additive() {
        for m in all_models() {
            let spec = m.spec();
            let v = spec.rest_v + 13.0;
            let (a, da) = rates(m.as_ref(), v, &spec.rest_state, 0.0);
            let (b, db) = rates(m.as_ref(), v, &spec.rest_state, 37.5);
            assert!(((b - a) - 37.5).abs() <= 4.0 * f64::EPSILON * b.abs().max(37.5));
            assert_eq!(da, db);
        }
    }

    #[test]
    fn rest_is_stable_without_stimulus() {
        for m in all_models() {
            let spec = m.spec();
            let (mut v, mut s) = (spec.rest_v, spec.rest_state.clone());
            let dt = spec.dt0 / 2.0;
            let n = (1000.0 / dt) as usize;
            integrate_cell(m.as_ref(), &mut v, &mut s, dt, n, 0.0, false, |_| 0.0, |_, _, _| true);
            assert!((v - spec.rest_v).abs() < 1.0, "{}: {} -> {v}", spec.name, spec.rest_v);
        }
    }

    #[test]
    fn node_state_serialization_round_trip() {
        let ap = model_by_name("aliev_panfilov").unwrap();
        let fb = model_by_name("maccannell").unwrap();
        let init = vec![
            (ap.clone(), -80.0, ap.spec().rest_state.clone()),
            (fb.clone(), -49.0, fb.spec().rest_state.clone()),
        ];
        let mut st = NodeStateArray::new(5, &[0, 1, 0, 0, 1], &init).unwrap();
        st.v[2] = 1.0 / 3.0;
        st.last_dvdt[4] = -1e-300;
        let json = serde_json::to_string(&st).unwrap();
        let back: NodeStateArray = serde_json::from_str(&json).unwrap();
        assert_eq!(back, st);
        assert_eq!(st.groups[1].nodes, vec![1, 4]);
    }

    #[test]
    fn single_beat_returns_near_rest() {
        let m = AlievPanfilov::new();
        let r = pace_to_steady_state(&m, 1000.0, 1, 50.0, 1.0).unwrap();
        assert!(r.v.is_finite());
        assert!((r.v - m.spec().rest_v).abs() < 5.0);
        assert!(r.apd90[0] > 100.0);
    }

    #[test]
    fn unstimulated_pacing_is_free_relaxation() {
        let m = MacCannell::new();
        let r = pace_to_steady_state(&m, 200.0, 2, 0.0, 1.0).unwrap();
        let (mut v, mut s) = (m.spec().rest_v, m.spec().rest_state.clone());
        let dt = m.spec().dt0 / 2.0;
        integrate_cell(&m, &mut v, &mut s, dt, 2 * (200.0 / dt).round() as usize, 0.0, false, |_| 0.0, |_, _, _| true);
        assert_eq!(r.v, v);
        assert_eq!(r.state, s);
        assert!(r.apd90.iter().all(|a| a.is_nan()));
    }

    #[test]
    fn pacing_rejects_divergence() {
        let m = AlievPanfilov::new();
        assert!(pace_to_steady_state(&m, 100.0, 1, 1e9, 1.0).is_err());
        assert!(pace_to_steady_state(&m, 100.0, 0, 1.0, 1.0).is_err());
    }

    #[test]
    fn dt0_bisection_two_variable_model() {
        let m = AlievPanfilov::new();
        let dt0 = estimate_dt0(&m, 400.0).unwrap();
        assert!(dt0 > 0.01 && dt0 <= 1.0, "dt0 = {dt0}");
        assert!(beat_is_stable(&m, dt0 / 2.0, 400.0));
    }
}
