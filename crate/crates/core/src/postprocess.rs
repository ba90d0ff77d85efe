//! Activation times, APD90, conduction velocity, NRMSE and trace alignment.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Minimum upstroke amplitude (mV) for a trace to count as an action potential.
pub const MIN_AP_AMPLITUDE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trace {
    pub node: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl Trace {
    pub fn new(node: usize, times: Vec<f64>, values: Vec<f64>) -> Self {
        Trace { node, times, values }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Linear interpolation; `None` outside the sampled window.
    pub fn sample(&self, t: f64) -> Option<f64> {
        let (first, last) = (*self.times.first()?, *self.times.last()?);
        if t < first || t > last {
            return None;
        }
        let i = self.times.partition_point(|&x| x <= t);
        if i == 0 {
            return Some(self.values[0]);
        }
        if i >= self.times.len() {
            return Some(*self.values.last().unwrap());
        }
        let (t0, t1) = (self.times[i - 1], self.times[i]);
        let w = (t - t0) / (t1 - t0);
        Some(self.values[i - 1] + w * (self.values[i] - self.values[i - 1]))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        w.write_record(["t_ms", "v_mV"]).map_err(|e| Error::io(path, e.into()))?;
        for (t, v) in self.times.iter().zip(&self.values) {
            w.write_record([t.to_string(), v.to_string()])
                .map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Index of the largest backward difference `(v_i - v_{i-1}) / (t_i - t_{i-1})`.
    fn max_slope_index(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for i in 1..self.len() {
            let d = (self.values[i] - self.values[i - 1]) / (self.times[i] - self.times[i - 1]);
            if best.is_none_or(|(_, b)| d > b) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    /// Time of maximum `dV/dt` refined by a parabola through the neighbouring
    /// backward differences.
    pub fn upstroke_time(&self) -> Option<f64> {
        let i = self.max_slope_index()?;
        let slope = |k: usize| (self.values[k] - self.values[k - 1]) / (self.times[k] - self.times[k - 1]);
        if i < 2 || i + 1 >= self.len() {
            return Some(self.times[i]);
        }
        let (a, b, c) = (slope(i - 1), slope(i), slope(i + 1));
        let denom = a - 2.0 * b + c;
        let delta = if denom.abs() > 0.0 {
            (0.5 * (a - c) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let dt = if delta >= 0.0 {
            self.times[i + 1] - self.times[i]
        } else {
            self.times[i] - self.times[i - 1]
        };
        Some(self.times[i] + delta * dt)
    }
}

/// Per-node scalar (LAT or APD90, ms) with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalarMap {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScalarMap {
    pub fn from_options(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let (values, valid) = values.into_iter().map(|v| (v.unwrap_or(f64::NAN), v.is_some())).unzip();
        ScalarMap { values, valid }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.valid[i].then_some(self.values[i])
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn write_csv(&self, mesh: &Mesh, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        w.write_record(["node", "x", "y", "value", "valid"])
            .map_err(|e| Error::io(path, e.into()))?;
        for (i, c) in mesh.coords.iter().enumerate() {
            let value = if self.valid[i] { self.values[i].to_string() } else { String::new() };
            w.write_record([
                i.to_string(),
                c[0].to_string(),
                c[1].to_string(),
                value,
                u8::from(self.valid[i]).to_string(),
            ])
            .map_err(|e| Error::io(path, e.into()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Interpolated time at which `v` first crosses `threshold` upwards.
fn upward_crossing(t0: f64, v0: f64, t1: f64, v1: f64, threshold: f64) -> Option<f64> {
    (v0 < threshold && v1 >= threshold).then(|| t0 + (threshold - v0) / (v1 - v0) * (t1 - t0))
}

/// LAT of every node from sampled histories (`history[node][sample]`).
pub fn compute_lat(times: &[f64], history: &[Vec<f64>], threshold: f64) -> ScalarMap {
    ScalarMap::from_options(history.iter().map(|series| {
        (1..times.len()).find_map(|k| upward_crossing(times[k - 1], series[k - 1], times[k], series[k], threshold))
    }))
}

/// Streaming LAT detector, fed once per solver step.
#[derive(Debug, Clone)]
pub struct LatDetector {
    threshold: f64,
    lat: Vec<Option<f64>>,
    prev: Vec<f64>,
    prev_t: f64,
}

impl LatDetector {
    pub fn new(threshold: f64, t0: f64, v0: &[f64]) -> Self {
        LatDetector {
            threshold,
            lat: vec![None; v0.len()],
            prev: v0.to_vec(),
            prev_t: t0,
        }
    }

    pub fn update(&mut self, t: f64, v: &[f64]) {
        for ((lat, prev), &cur) in self.lat.iter_mut().zip(self.prev.iter_mut()).zip(v) {
            if lat.is_none() {
                *lat = upward_crossing(self.prev_t, *prev, t, cur, self.threshold);
            }
            *prev = cur;
        }
        self.prev_t = t;
    }

    pub fn finish(&self) -> ScalarMap {
        ScalarMap::from_options(self.lat.iter().copied())
    }
}

/// APD90 of a single action potential: from the instant of maximum `dV/dt`
/// to the first downward crossing of `V_peak - 0.9 (V_peak - V_rest)` after
/// the peak, where `V_rest` is the minimum before the upstroke.
pub fn compute_apd90(trace: &Trace) -> Result<f64> {
    let no_ap = || Error::Numerical(format!("no action potential in trace of node {}", trace.node));
    let start = trace.max_slope_index().ok_or_else(no_ap)?;
    let v = &trace.values;
    let t = &trace.times;
    let rest = v[..start].iter().copied().fold(f64::INFINITY, f64::min).min(v[start - 1]);
    let (peak_idx, peak) = v[start..]
        .iter()
        .enumerate()
        .fold((start, f64::NEG_INFINITY), |acc, (k, &x)| if x > acc.1 { (start + k, x) } else { acc });
    if peak - rest < MIN_AP_AMPLITUDE {
        return Err(no_ap());
    }
    let v90 = peak - 0.9 * (peak - rest);
    for k in peak_idx + 1..v.len() {
        if v[k] < v90 {
            let end = t[k - 1] + (v90 - v[k - 1]) / (v[k] - v[k - 1]) * (t[k] - t[k - 1]);
            return Ok(end - t[start]);
        }
    }
    Err(Error::Numerical(format!(
        "trace of node {} does not repolarize below V90 = {v90:.2} mV",
        trace.node
    )))
}

/// Streaming per-node APD90 with the same definition as [`compute_apd90`],
/// restricted to the first action potential of each node.
#[derive(Debug, Clone)]
pub struct ApdDetector {
    nodes: Vec<ApdNode>,
    prev_t: f64,
}

#[derive(Debug, Clone)]
struct ApdNode {
    prev_v: f64,
    rest: f64,
    max_slope: f64,
    start: f64,
    peak: f64,
    activated: bool,
    done: Option<f64>,
}

impl ApdDetector {
    pub fn new(t0: f64, v0: &[f64]) -> Self {
        ApdDetector {
            nodes: v0
                .iter()
                .map(|&v| ApdNode {
                    prev_v: v,
                    rest: v,
                    max_slope: f64::NEG_INFINITY,
                    start: f64::NAN,
                    peak: v,
                    activated: false,
                    done: None,
                })
                .collect(),
            prev_t: t0,
        }
    }

    pub fn update(&mut self, t: f64, v: &[f64]) {
        let dt = t - self.prev_t;
        for (n, &cur) in self.nodes.iter_mut().zip(v) {
            if n.done.is_some() {
                continue;
            }
            let slope = (cur - n.prev_v) / dt;
            if !n.activated {
                if slope > n.max_slope {
                    n.max_slope = slope;
                    n.start = t;
                    n.rest = n.rest.min(n.prev_v);
                } else {
                    n.rest = n.rest.min(cur);
                }
                n.peak = n.peak.max(cur);
                if n.peak - n.rest >= MIN_AP_AMPLITUDE {
                    n.activated = true;
                }
            } else {
                if cur > n.peak {
                    n.peak = cur;
                } else if slope > n.max_slope && cur < n.peak {
                    // a second, faster upstroke cannot occur before repolarization
                }
                let v90 = n.peak - 0.9 * (n.peak - n.rest);
                if n.prev_v >= v90 && cur < v90 {
                    let end = self.prev_t + (v90 - n.prev_v) / (cur - n.prev_v) * dt;
                    n.done = Some(end - n.start);
                }
            }
            // the upstroke may continue steepening after activation is declared
            if n.activated && n.done.is_none() && slope > n.max_slope && cur >= n.prev_v {
                n.max_slope = slope;
                n.start = t;
            }
            n.prev_v = cur;
        }
        self.prev_t = t;
    }

    pub fn finish(&self) -> ScalarMap {
        ScalarMap::from_options(self.nodes.iter().map(|n| n.done))
    }
}

/// Conduction velocity (cm/ms) between two probe nodes of a LAT map.
pub fn compute_cv(lat: &ScalarMap, mesh: &Mesh, a: usize, b: usize) -> Result<f64> {
    let la = lat.get(a).ok_or_else(|| Error::Numerical(format!("probe node {a} never activated")))?;
    let lb = lat.get(b).ok_or_else(|| Error::Numerical(format!("probe node {b} never activated")))?;
    let dlat = (lb - la).abs();
    if dlat == 0.0 {
        return Err(Error::Numerical(format!(
            "probe nodes {a} and {b} activate simultaneously; conduction velocity undefined"
        )));
    }
    let (pa, pb) = (mesh.coords[a], mesh.coords[b]);
    Ok((pa[0] - pb[0]).hypot(pa[1] - pb[1]) / dlat)
}

/// Root-mean-square difference normalized by the reference range.
pub fn nrmse(reference: &ScalarMap, candidate: &ScalarMap) -> Result<f64> {
    if reference.len() != candidate.len() {
        return Err(Error::invalid(format!(
            "map sizes differ: {} vs {}",
            reference.len(),
            candidate.len()
        )));
    }
    let mismatched = reference.valid.iter().zip(&candidate.valid).filter(|(a, b)| a != b).count();
    if mismatched > 0 {
        return Err(Error::Numerical(format!(
            "validity masks differ at {mismatched} nodes"
        )));
    }
    let (mut lo, mut hi, mut sq, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
    for i in 0..reference.len() {
        if let (Some(u), Some(c)) = (reference.get(i), candidate.get(i)) {
            lo = lo.min(u);
            hi = hi.max(u);
            sq += (c - u) * (c - u);
            n += 1;
        }
    }
    if n == 0 || !(hi > lo) {
        return Err(Error::Numerical("reference map has zero range".into()));
    }
    Ok((sq / n as f64).sqrt() / (hi - lo))
}

/// Shifts `b` so that both maximum-slope instants coincide and returns the
/// largest absolute voltage difference over the overlapping window.
pub fn align_and_diff(a: &Trace, b: &Trace) -> Result<f64> {
    let detect = |tr: &Trace| -> Result<f64> {
        let lo = tr.values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = tr.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi - lo >= MIN_AP_AMPLITUDE) {
            return Err(Error::Numerical(format!("no action potential in trace of node {}", tr.node)));
        }
        tr.upstroke_time()
            .ok_or_else(|| Error::Numerical(format!("empty trace for node {}", tr.node)))
    };
    let shift = detect(a)? - detect(b)?;
    let mut worst: Option<f64> = None;
    for (&t, &va) in a.times.iter().zip(&a.values) {
        if let Some(vb) = b.sample(t - shift) {
            let d = (va - vb).abs();
            worst = Some(worst.map_or(d, |w: f64| w.max(d)));
        }
    }
    worst.ok_or_else(|| Error::Numerical("aligned traces do not overlap".into()))
}
