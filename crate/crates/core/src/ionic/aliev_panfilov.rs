//! Two-variable Aliev-Panfilov excitable medium (Aliev & Panfilov, 1996),
//! rescaled to millivolts and milliseconds: `V = 100 u - 80`, `t = 12.9 tau`.

use super::{CellModel, CellModelSpec};

const K: f64 = 8.0;
const A: f64 = 0.15;
const EPS0: f64 = 0.002;
const MU1: f64 = 0.2;
const MU2: f64 = 0.3;
const V_REST: f64 = -80.0;
const V_AMP: f64 = 100.0;
const T_SCALE: f64 = 12.9;

#[derive(Debug)]
pub struct AlievPanfilov {
    spec: CellModelSpec,
}

impl AlievPanfilov {
    pub fn new() -> Self {
        AlievPanfilov {
            spec: CellModelSpec {
                name: "aliev_panfilov".into(),
                state_names: vec!["w"],
                rest_v: V_REST,
                rest_state: vec![0.0],
                dt0: 0.1,
                rest_tolerance: 0.0,
                stim_amplitude: 50.0,
                stim_duration: 1.0,
            },
        }
    }
}

impl Default for AlievPanfilov {
    fn default() -> Self {
        Self::new()
    }
}

impl CellModel for AlievPanfilov {
    fn spec(&self) -> &CellModelSpec {
        &self.spec
    }

    fn rates(&self, v: f64, s: &[f64], i_stim: f64, ds: &mut [f64]) -> f64 {
        let u = (v - V_REST) / V_AMP;
        let w = s[0];
        let du = K * u * (1.0 - u) * (u - A) - u * w;
        let eps = EPS0 + MU1 * w / (u + MU2);
        ds[0] = eps * (-w - K * u * (u - A - 1.0)) / T_SCALE;
        V_AMP * du / T_SCALE + i_stim
    }
}
