//! Stimulation protocols and the diastolic-threshold search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (ms) applied to window edges so that sub-step times that land a
/// rounding error away from an edge are classified consistently.
const WINDOW_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub nodes: Vec<usize>,
    pub t_start: f64,
    pub duration: f64,
    /// mV/ms
    pub amplitude: f64,
    /// Repetition period in ms; `None` for a single shot.
    pub period: Option<f64>,
}

impl Stimulus {
    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        let mut errs = Vec::new();
        if self.nodes.is_empty() {
            errs.push("stimulus node set is empty".to_string());
        }
        if let Some(&bad) = self.nodes.iter().find(|&&n| n >= n_nodes) {
            errs.push(format!("stimulus node {bad} out of range (mesh has {n_nodes} nodes)"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            errs.push(format!("stimulus duration must be positive, got {}", self.duration));
        }
        if !self.amplitude.is_finite() {
            errs.push("stimulus amplitude must be finite".into());
        }
        if !(self.t_start >= 0.0 && self.t_start.is_finite()) {
            errs.push(format!("stimulus start must be >= 0, got {}", self.t_start));
        }
        if let Some(p) = self.period {
            if !(p > self.duration && p.is_finite()) {
                errs.push(format!("stimulus period {p} must exceed its duration {}", self.duration));
            }
        }
        if errs.is_empty() { Ok(()) } else { Err(Error::Validation(errs)) }
    }

    /// Half-open activation window test.
    pub fn is_active(&self, t: f64) -> bool {
        let rel = t - self.t_start;
        if rel < -WINDOW_EPS {
            return false;
        }
        let phase = match self.period {
            Some(p) => {
                let r = rel.rem_euclid(p);
                // a phase a hair below the period is really the start of the next window
                if p - r <= WINDOW_EPS { 0.0 } else { r }
            }
            None => rel,
        };
        phase < self.duration - WINDOW_EPS
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub stimuli: Vec<Stimulus>,
}

impl Protocol {
    pub fn new(stimuli: Vec<Stimulus>) -> Self {
        Protocol { stimuli }
    }

    pub fn validate(&self, n_nodes: usize) -> Result<()> {
        let errs: Vec<String> = self
            .stimuli
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s.validate(n_nodes) {
                Err(Error::Validation(e)) => Some(e.into_iter().map(move |m| format!("stimulus {i}: {m}"))),
                _ => None,
            })
            .flatten()
            .collect();
        if errs.is_empty() { Ok(()) } else { Err(Error::Validation(errs)) }
    }

    /// Per-node lookup table for use inside the reaction step.
    pub fn compile(&self, n_nodes: usize) -> CompiledProtocol {
        let mut counts = vec![0usize; n_nodes + 1];
        for s in &self.stimuli {
            for &n in &s.nodes {
                counts[n + 1] += 1;
            }
        }
        for i in 0..n_nodes {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut index = vec![0u32; counts[n_nodes]];
        for (k, s) in self.stimuli.iter().enumerate() {
            for &n in &s.nodes {
                index[fill[n]] = k as u32;
                fill[n] += 1;
            }
        }
        CompiledProtocol {
            stimuli: self.stimuli.clone(),
            offsets: counts,
            index,
        }
    }
}

/// Sum of the amplitudes of all stimuli active at `(node, t)`.
pub fn stim_current(protocol: &Protocol, node: usize, t: f64) -> f64 {
    protocol
        .stimuli
        .iter()
        .filter(|s| s.is_active(t) && s.nodes.contains(&node))
        .map(|s| s.amplitude)
        .sum()
}

/// Protocol with the stimuli of each node precomputed.
#[derive(Debug, Clone)]
pub struct CompiledProtocol {
    stimuli: Vec<Stimulus>,
    offsets: Vec<usize>,
    index: Vec<u32>,
}

impl CompiledProtocol {
    pub fn current(&self, node: usize, t: f64) -> f64 {
        let mut sum = 0.0;
        for &k in &self.index[self.offsets[node]..self.offsets[node + 1]] {
            let s = &self.stimuli[k as usize];
            if s.is_active(t) {
                sum += s.amplitude;
            }
        }
        sum
    }

    pub fn has_stimulus(&self, node: usize) -> bool {
        self.offsets[node + 1] > self.offsets[node]
    }
}

/// Shared timing and strength for [`grouped_delays`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StimulusTemplate {
    pub t_start: f64,
    pub duration: f64,
    pub amplitude: f64,
}

/// One periodic stimulus per group, offset by the group's delay. A blocked
/// group is simply left out of `groups`.
pub fn grouped_delays(groups: &[(Vec<usize>, f64)], period: f64, template: StimulusTemplate) -> Result<Protocol> {
    if let Some((_, d)) = groups.iter().find(|(_, d)| !(*d >= 0.0 && d.is_finite())) {
        return Err(Error::invalid(format!("group delay must be >= 0, got {d}")));
    }
    Ok(Protocol::new(
        groups
            .iter()
            .map(|(nodes, delay)| Stimulus {
                nodes: nodes.clone(),
                t_start: template.t_start + delay,
                duration: template.duration,
                amplitude: template.amplitude,
                period: Some(period),
            })
            .collect(),
    ))
}

/// Relative resolution of the threshold bisection.
pub const THRESHOLD_TOL: f64 = 0.05;
/// The upper bracket may grow to this multiple of the initial guess.
pub const THRESHOLD_MAX_FACTOR: f64 = 1000.0;

/// Smallest amplitude (within [`THRESHOLD_TOL`]) for which `propagates`
/// reports a propagated response. Zero amplitude is taken as the lower bracket
/// and checked first.
pub fn diastolic_threshold(initial_guess: f64, mut propagates: impl FnMut(f64) -> Result<bool>) -> Result<f64> {
    if !(initial_guess > 0.0 && initial_guess.is_finite()) {
        return Err(Error::invalid("threshold search needs a positive initial guess"));
    }
    if propagates(0.0)? {
        return Err(Error::Numerical("tissue propagates without any stimulus".into()));
    }
    let mut lo = 0.0;
    let mut hi = initial_guess;
    while !propagates(hi)? {
        lo = hi;
        hi *= 2.0;
        if hi > THRESHOLD_MAX_FACTOR * initial_guess {
            return Err(Error::Numerical(format!(
                "no propagation up to {} mV/ms",
                THRESHOLD_MAX_FACTOR * initial_guess
            )));
        }
    }
    while hi - lo > THRESHOLD_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if propagates(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s1() -> Stimulus {
        Stimulus {
            nodes: vec![0, 2],
            t_start: 50.0,
            duration: 1.0,
            amplitude: 40.0,
            period: None,
        }
    }

    #[test]
    fn half_open_window() {
        let p = Protocol::new(vec![s1()]);
        assert_eq!(stim_current(&p, 0, 10.0), 0.0);
        assert_eq!(stim_current(&p, 0, 50.0), 40.0);
        assert_eq!(stim_current(&p, 0, 50.5), 40.0);
        assert_eq!(stim_current(&p, 0, 51.0), 0.0);
        assert_eq!(stim_current(&p, 1, 50.5), 0.0);
        // sub-step times that carry rounding error
        assert_eq!(stim_current(&p, 0, 500.0 * 0.1), 40.0);
        assert_eq!(stim_current(&p, 0, 510.0 * 0.1), 0.0);
    }

    #[test]
    fn cross_field_and_overlap() {
        let mut s2 = s1();
        s2.t_start = 200.0;
        s2.nodes = vec![2, 3];
        let p = Protocol::new(vec![s1(), s2]);
        assert_eq!(stim_current(&p, 2, 50.2), 40.0);
        assert_eq!(stim_current(&p, 2, 200.2), 40.0);
        assert_eq!(stim_current(&p, 3, 50.2), 0.0);
        let mut both = p.clone();
        both.stimuli[1].t_start = 50.0;
        assert_eq!(stim_current(&both, 2, 50.2), 80.0);
    }

    #[test]
    fn grouped() {
        let t = StimulusTemplate {
            t_start: 0.0,
            duration: 2.0,
            amplitude: 30.0,
        };
        let groups: Vec<(Vec<usize>, f64)> = [0.0, 7.0, 4.0, 11.0].iter().enumerate().map(|(i, &d)| (vec![i], d)).collect();
        let p = grouped_delays(&groups, 1000.0, t).unwrap();
        let starts: Vec<f64> = p.stimuli.iter().map(|s| s.t_start).collect();
        assert_eq!(starts, vec![0.0, 7.0, 4.0, 11.0]);
        assert!(grouped_delays(&[], 1000.0, t).unwrap().stimuli.is_empty());
        let plain = grouped_delays(&[(vec![0], 0.0)], 1000.0, t).unwrap();
        assert_eq!(stim_current(&plain, 0, 2001.0), 30.0);
        assert_eq!(stim_current(&plain, 0, 2002.0), 0.0);
        assert!(grouped_delays(&[(vec![0], -1.0)], 1000.0, t).is_err());
    }

    #[test]
    fn validation_collects_errors() {
        let bad = Stimulus {
            nodes: vec![],
            t_start: -1.0,
            duration: 0.0,
            amplitude: f64::NAN,
            period: Some(0.5),
        };
        match Protocol::new(vec![bad]).validate(10) {
            Err(Error::Validation(e)) => assert_eq!(e.len(), 4, "{e:?}"),
            other => panic!("{other:?}"),
        }
        assert!(Protocol::new(vec![s1()]).validate(1).is_err());
        assert!(Protocol::new(vec![s1()]).validate(3).is_ok());
    }

    #[test]
    fn threshold_bisection() {
        let truth = 13.7;
        let mut calls = 0;
        let thr = diastolic_threshold(1.0, |a| {
            calls += 1;
            Ok(a >= truth)
        })
        .unwrap();
        assert!(thr >= truth && thr <= truth * (1.0 + THRESHOLD_TOL));
        assert!(2.0 * thr >= truth && 0.5 * thr < truth);
        assert!(calls < 30);
        assert!(diastolic_threshold(1.0, |a| Ok(a >= 5000.0)).is_err());
        assert!(diastolic_threshold(1.0, |_| Ok(true)).is_err());
    }

    proptest! {
        #[test]
        fn compiled_matches_direct(t in 0.0f64..3000.0, node in 0usize..6) {
            let mut periodic = s1();
            periodic.period = Some(400.0);
            periodic.nodes = vec![1, 2, 5];
            let p = Protocol::new(vec![s1(), periodic]);
            let c = p.compile(6);
            prop_assert_eq!(c.current(node, t), stim_current(&p, node, t));
        }

        #[test]
        fn integral_equals_charge(dt_exp in 1u32..5, period in 300.0f64..700.0) {
            // sum over a uniform grid that resolves the window edges exactly
            let dt = 1.0 / f64::from(1u32 << dt_exp);
            let s = Stimulus { nodes: vec![0], t_start: 10.0, duration: 2.0, amplitude: 7.0, period: Some(period.round()) };
            let p = Protocol::new(vec![s]);
            let t_end = 10.0 + 3.0 * period.round() + 100.0;
            let n = (t_end / dt) as usize;
            let integral: f64 = (0..n).map(|k| stim_current(&p, 0, k as f64 * dt) * dt).sum();
            prop_assert!((integral - 7.0 * 2.0 * 4.0).abs() < 1e-9);
        }
    }
}
