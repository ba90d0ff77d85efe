//! Active fibroblast model of MacCannell et al. (2007): a time- and
//! voltage-dependent delayed rectifier `I_Kv`, inward rectifier `I_K1`,
//! Na/K pump and background sodium current. Ionic concentrations are fixed.

use super::{CellModel, CellModelSpec};

const R: f64 = 8314.472;
const T: f64 = 306.15;
const F: f64 = 96485.3415;

const K_O: f64 = 5.4;
const K_I: f64 = 129.4350;
const NA_O: f64 = 130.0110;
const NA_I: f64 = 8.5547;

const G_KV: f64 = 0.25;
const G_K1: f64 = 0.4822;
const I_NAK_MAX: f64 = 1.644;
const K_MK: f64 = 1.0;
const K_MNA: f64 = 11.0;
const V_REV: f64 = -150.0;
const B_NAK: f64 = -200.0;
const G_BNA: f64 = 0.0095;

#[derive(Debug)]
pub struct MacCannell {
    spec: CellModelSpec,
    e_k: f64,
    e_na: f64,
}

impl MacCannell {
    pub fn new() -> Self {
        MacCannell {
            spec: CellModelSpec {
                name: "maccannell".into(),
                state_names: vec!["r", "s"],
                rest_v: -49.6,
                rest_state: vec![0.0, 1.0],
                dt0: 0.1,
                rest_tolerance: 0.0,
                stim_amplitude: 0.0,
                stim_duration: 1.0,
            },
            e_k: R * T / F * (K_O / K_I).ln(),
            e_na: R * T / F * (NA_O / NA_I).ln(),
        }
        .with_equilibrated_rest()
    }

    /// Replaces the nominal rest values by the fixed point of the gating and
    /// voltage equations so that the resting derivative is numerically zero.
    fn with_equilibrated_rest(mut self) -> Self {
        let mut v = self.spec.rest_v;
        // Newton on the steady-state current with gates at their steady state.
        for _ in 0..50 {
            let f = |v: f64| {
                let (r, s) = (r_inf(v), s_inf(v));
                self.total_current(v, r, s)
            };
            let h = 1e-6;
            let df = (f(v + h) - f(v - h)) / (2.0 * h);
            let step = f(v) / df;
            v -= step;
            if step.abs() < 1e-13 {
                break;
            }
        }
        self.spec.rest_v = v;
        self.spec.rest_state = vec![r_inf(v), s_inf(v)];
        self
    }

    fn total_current(&self, v: f64, r: f64, s: f64) -> f64 {
        let i_kv = G_KV * r * s * (v - self.e_k);
        let dv = v - self.e_k;
        let a_k1 = 0.1 / (1.0 + (0.06 * (dv - 200.0)).exp());
        let b_k1 = (3.0 * (0.0002 * (dv + 100.0)).exp() + (0.1 * (dv - 10.0)).exp()) / (1.0 + (-0.5 * dv).exp());
        let i_k1 = G_K1 * a_k1 / (a_k1 + b_k1) * dv;
        let i_nak = I_NAK_MAX * K_O / (K_O + K_MK) * (v - V_REV) / (v - B_NAK) * (NA_I / (NA_I + K_MNA)).powf(1.5);
        let i_bna = G_BNA * (v - self.e_na);
        i_kv + i_k1 + i_nak + i_bna
    }
}

impl Default for MacCannell {
    fn default() -> Self {
        Self::new()
    }
}

fn r_inf(v: f64) -> f64 {
    1.0 / (1.0 + (-(v + 20.0) / 11.0).exp())
}

fn s_inf(v: f64) -> f64 {
    1.0 / (1.0 + ((v + 23.0) / 7.0).exp())
}

impl CellModel for MacCannell {
    fn spec(&self) -> &CellModelSpec {
        &self.spec
    }

    fn rates(&self, v: f64, s: &[f64], i_stim: f64, ds: &mut [f64]) -> f64 {
        let (r, sg) = (s[0], s[1]);
        let tau_r = 20.3 + 138.0 * (-((v + 20.0) / 25.9).powi(2)).exp();
        let tau_s = 1574.0 + 5268.0 * (-((v + 23.0) / 22.7).powi(2)).exp();
        ds[0] = (r_inf(v) - r) / tau_r;
        ds[1] = (s_inf(v) - sg) / tau_s;
        -self.total_current(v, r, sg) + i_stim
    }
}
