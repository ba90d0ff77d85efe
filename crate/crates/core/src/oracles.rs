//! Independent reference computations: eigenvalue bounds of the diffusion
//! operator, fine-step reference runs and a linear reaction-diffusion problem
//! with known solutions.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{assemble, build_diffusion_field, diffusion_substep, AssembledOperator};
use crate::ionic::{CellModel, CellModelSpec, NodeStateArray, SharedModel};
use crate::mesh::{build_regular_sheet, Mesh};
use crate::splitting::{strang_advance, RunOptions, Scheme, SchemeConfig, Simulation, SimulationResult, SplitSystem};
use crate::stimulus::Protocol;

pub const SPECTRAL_TOL: f64 = 1e-6;
pub const SPECTRAL_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralBound {
    /// Largest eigenvalue of `M^-1 K` (1/ms).
    pub lambda_max: f64,
    /// Forward Euler stability limit `2 / lambda_max` (ms).
    pub critical_step: f64,
    pub iterations: usize,
}

/// Power iteration on the symmetric similarity transform `M^-1/2 K M^-1/2`
/// of `M^-1 K`. Converged when the Rayleigh quotient differs from its value
/// at half the iteration count by less than [`SPECTRAL_TOL`] (relative); the
/// quotient approaches `lambda_max` from below roughly like `1/k^2`, so this
/// comparison tracks the remaining error rather than the last increment.
pub fn spectral_bound(op: &AssembledOperator) -> Result<SpectralBound> {
    let n = op.n();
    if n == 0 {
        return Err(Error::invalid("empty operator"));
    }
    let inv_sqrt_m: Vec<f64> = op.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut x);
    let mut y = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut history: Vec<f64> = Vec::new();
    for it in 1..=SPECTRAL_MAX_ITER {
        for i in 0..n {
            tmp[i] = x[i] * inv_sqrt_m[i];
        }
        op.stiffness.mul_vec(&tmp, &mut y);
        for i in 0..n {
            y[i] *= inv_sqrt_m[i];
        }
        let rho: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        history.push(rho);
        if !(rho > 0.0) {
            return Err(Error::Numerical("operator has no positive eigenvalue".into()));
        }
        if it >= 20 {
            let earlier = history[it / 2 - 1];
            if (rho - earlier).abs() <= SPECTRAL_TOL * rho {
                return Ok(SpectralBound {
                    lambda_max: rho,
                    critical_step: 2.0 / rho,
                    iterations: it,
                });
            }
        }
        std::mem::swap(&mut x, &mut y);
        normalize(&mut x);
    }
    Err(Error::Numerical(format!(
        "power iteration did not converge in {SPECTRAL_MAX_ITER} iterations"
    )))
}

fn normalize(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);
}

/// Symmetric dense form `diag(a) + M^-1/2 K M^-1/2` of the semi-discrete
/// operator `diag(a) + M^-1 K`.
fn symmetric_dense(op: &AssembledOperator, decay: &[f64]) -> DMatrix<f64> {
    let n = op.n();
    let mut s = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for (j, kij) in op.stiffness.row(i) {
            s[(i, j)] = kij / (op.mass[i] * op.mass[j]).sqrt();
        }
        s[(i, i)] += decay[i];
    }
    s
}

/// All eigenvalues of `M^-1 K` by dense decomposition (small meshes only).
pub fn dense_eigenvalues(op: &AssembledOperator) -> Vec<f64> {
    let eig = SymmetricEigen::new(symmetric_dense(op, &vec![0.0; op.n()]));
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Exact propagator `exp(-t (diag(a) + M^-1 K))` of the semi-discrete linear problem.
#[derive(Debug, Clone)]
pub struct LinearPropagator {
    sqrt_m: Vec<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
}

impl LinearPropagator {
    pub fn new(op: &AssembledOperator, decay: &[f64]) -> Self {
        let eig = SymmetricEigen::new(symmetric_dense(op, decay));
        LinearPropagator {
            sqrt_m: op.mass.iter().map(|m| m.sqrt()).collect(),
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        }
    }

    /// Dense matrix of the propagator over time `t`.
    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        let q = &self.eigenvectors;
        let scaled = DMatrix::from_fn(q.nrows(), q.ncols(), |i, j| q[(i, j)] * (-self.eigenvalues[j] * t).exp());
        let mut p = scaled * q.transpose();
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                p[(i, j)] *= self.sqrt_m[j] / self.sqrt_m[i];
            }
        }
        p
    }

    pub fn apply(&self, u: &[f64], t: f64) -> Vec<f64> {
        (self.matrix(t) * DVector::from_column_slice(u)).iter().copied().collect()
    }
}

/// `u_t = -a(x) u + div(d grad u)` on a rectangle with zero-flux boundaries,
/// started from a sum of cosine modes. With `a_variation = 0` the continuous
/// solution is `sum_mode c e^{-(a + d lambda) t} cos(m pi x / lx) cos(n pi y / ly)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearTestProblem {
    pub lx: f64,
    pub ly: f64,
    pub h: f64,
    /// Mean decay rate (1/ms).
    pub a: f64,
    /// Amplitude of the `cos(pi x / lx)` variation of the decay rate. A
    /// spatially constant decay commutes with diffusion, which would make the
    /// splitting exact; the variation gives the splitting a nonzero error.
    pub a_variation: f64,
    /// Isotropic diffusivity (cm^2/ms).
    pub d: f64,
    /// `(m, n, amplitude)` cosine modes of the initial field.
    pub modes: Vec<(u32, u32, f64)>,
}

impl Default for LinearTestProblem {
    fn default() -> Self {
        LinearTestProblem {
            lx: 1.0,
            ly: 0.2,
            h: 0.05,
            a: 0.1,
            a_variation: 0.08,
            d: 0.001,
            modes: vec![(0, 0, 1.0), (1, 0, 0.5), (2, 1, 0.25)],
        }
    }
}

impl LinearTestProblem {
    pub fn mesh(&self) -> Result<Mesh> {
        build_regular_sheet(self.lx, self.ly, self.h, 0.0)
    }

    pub fn operator(&self, mesh: &Mesh) -> Result<AssembledOperator> {
        assemble(mesh, &build_diffusion_field(mesh, self.d, self.d, 1.0)?)
    }

    pub fn decay(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.coords
            .iter()
            .map(|c| self.a + self.a_variation * (PI * c[0] / self.lx).cos())
            .collect()
    }

    pub fn initial(&self, mesh: &Mesh) -> Vec<f64> {
        mesh.coords.iter().map(|c| self.modes_at(c, 0.0)).collect()
    }

    fn modes_at(&self, c: &[f64; 2], t: f64) -> f64 {
        self.modes
            .iter()
            .map(|&(m, n, amp)| {
                let (kx, ky) = (f64::from(m) * PI / self.lx, f64::from(n) * PI / self.ly);
                let lambda = kx * kx + ky * ky;
                amp * (-(self.a + self.d * lambda) * t).exp() * (kx * c[0]).cos() * (ky * c[1]).cos()
            })
            .sum()
    }

    /// Closed-form continuous solution; only defined for constant decay.
    pub fn analytic(&self, mesh: &Mesh, t: f64) -> Option<Vec<f64>> {
        (self.a_variation == 0.0).then(|| mesh.coords.iter().map(|c| self.modes_at(c, t)).collect())
    }
}

/// Sub-integrators used inside the Strang step of [`split_solution`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SubIntegrator {
    /// Exact exponentials for both the decay and the semi-discrete diffusion.
    Exact,
    /// One forward Euler step per half step of diffusion and per reaction step.
    ForwardEuler,
}

struct LinearSplit<'a> {
    u: Vec<f64>,
    scratch: Vec<f64>,
    decay: &'a [f64],
    op: &'a AssembledOperator,
    kind: SubIntegrator,
    half_step: Option<DMatrix<f64>>,
}

impl SplitSystem for LinearSplit<'_> {
    fn diffuse_half(&mut self, _t: f64, dt: f64) -> Result<()> {
        match &self.half_step {
            Some(p) => {
                let next = p * DVector::from_column_slice(&self.u);
                self.u.copy_from_slice(next.as_slice());
            }
            None => {
                diffusion_substep(self.op, &self.u, &mut self.scratch, 0.5 * dt);
                std::mem::swap(&mut self.u, &mut self.scratch);
            }
        }
        Ok(())
    }

    fn react(&mut self, _t: f64, dt: f64) -> Result<()> {
        for (u, &a) in self.u.iter_mut().zip(self.decay) {
            *u *= match self.kind {
                SubIntegrator::Exact => (-a * dt).exp(),
                SubIntegrator::ForwardEuler => 1.0 - a * dt,
            };
        }
        Ok(())
    }
}

/// Strang-split solution of the linear problem at `t_end` with global step `dt`.
pub fn split_solution(
    problem: &LinearTestProblem,
    mesh: &Mesh,
    op: &AssembledOperator,
    kind: SubIntegrator,
    dt: f64,
    t_end: f64,
) -> Result<Vec<f64>> {
    let n_steps = (t_end / dt).round() as usize;
    if ((n_steps as f64) * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::invalid(format!("t_end {t_end} is not a multiple of dt {dt}")));
    }
    let decay = problem.decay(mesh);
    let half_step = match kind {
        SubIntegrator::Exact => Some(LinearPropagator::new(op, &vec![0.0; op.n()]).matrix(0.5 * dt)),
        SubIntegrator::ForwardEuler => {
            if 0.5 * dt > op.dt_s {
                return Err(Error::invalid(format!(
                    "forward Euler diffusion half step {} exceeds dt_s {}",
                    0.5 * dt,
                    op.dt_s
                )));
            }
            None
        }
    };
    let mut sys = LinearSplit {
        u: problem.initial(mesh),
        scratch: vec![0.0; op.n()],
        decay: &decay,
        op,
        kind,
        half_step,
    };
    for n in 0..n_steps {
        strang_advance(&mut sys, n as f64 * dt, dt)?;
    }
    Ok(sys.u)
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceStudy {
    pub dts: Vec<f64>,
    /// Max-norm error against the exact semi-discrete solution.
    pub errors: Vec<f64>,
    /// `log2(e(dt) / e(dt/2))` for consecutive pairs.
    pub orders: Vec<f64>,
}

/// Splitting error at `t_end` for `dt, dt/2, ...` (`levels` values).
pub fn linear_convergence(
    problem: &LinearTestProblem,
    kind: SubIntegrator,
    dt: f64,
    levels: usize,
    t_end: f64,
) -> Result<ConvergenceStudy> {
    let mesh = problem.mesh()?;
    if mesh.n_nodes() > 2000 {
        return Err(Error::invalid("linear test mesh too large for the dense oracle"));
    }
    let op = problem.operator(&mesh)?;
    let exact = LinearPropagator::new(&op, &problem.decay(&mesh)).apply(&problem.initial(&mesh), t_end);
    let mut dts = Vec::new();
    let mut errors = Vec::new();
    for lvl in 0..levels {
        let step = dt / f64::from(1u32 << lvl);
        let u = split_solution(problem, &mesh, &op, kind, step, t_end)?;
        let err = u.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        dts.push(step);
        errors.push(err);
    }
    let orders = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    Ok(ConvergenceStudy { dts, errors, orders })
}

/// `dV/dt = -a V + i_stim` with one inert state; lets the production driver
/// run the linear test problem.
#[derive(Debug)]
pub struct LinearDecay {
    spec: CellModelSpec,
    a: f64,
}

impl LinearDecay {
    pub fn new(a: f64, dt0: f64) -> Self {
        LinearDecay {
            spec: CellModelSpec {
                name: "linear_decay".into(),
                state_names: vec!["inert"],
                rest_v: 0.0,
                rest_state: vec![0.0],
                dt0,
                rest_tolerance: 0.0,
                stim_amplitude: 0.0,
                stim_duration: 1.0,
            },
            a,
        }
    }
}

impl CellModel for LinearDecay {
    fn spec(&self) -> &CellModelSpec {
        &self.spec
    }

    fn rates(&self, v: f64, _s: &[f64], i_stim: f64, ds: &mut [f64]) -> f64 {
        ds[0] = 0.0;
        -self.a * v + i_stim
    }
}

/// Step sizes of a fine reference run: OST at `min(dt0) / 10` with diffusion
/// sub-steps no longer than `dt_s / 10`.
pub fn reference_steps(models: &[SharedModel], dt_s: f64) -> (f64, u32) {
    let dt0 = models.iter().map(|m| m.spec().dt0).fold(f64::INFINITY, f64::min);
    let dt = dt0 / 10.0;
    let l = ((0.5 * dt) / (dt_s / 10.0)).ceil().max(1.0) as u32;
    (dt, l)
}

/// Fine-step reference run for small problems (at most 10^4 nodes).
pub fn reference_solution(
    op: &AssembledOperator,
    models: Vec<SharedModel>,
    state: NodeStateArray,
    protocol: &Protocol,
    t_end: f64,
    record_interval: f64,
    opts: &RunOptions,
) -> Result<SimulationResult> {
    if op.n() > 10_000 {
        return Err(Error::invalid(format!(
            "reference runs are limited to 10^4 nodes, problem has {}",
            op.n()
        )));
    }
    let (dt, l) = reference_steps(&models, op.dt_s);
    if !(t_end > 0.0) {
        return Err(Error::invalid("reference run needs t_end > 0"));
    }
    let mut cfg = SchemeConfig::new(Scheme::Ost, dt, t_end);
    cfg.record_interval = record_interval;
    let mut sim = Simulation::new(op, models, state, protocol, &cfg)?;
    sim.set_diffusion_substeps(l);
    sim.run(opts).map_err(|e| match e {
        Error::Instability { node, time, detail } => Error::Numerical(format!(
            "reference run unstable at node {node}, t = {time} ms ({detail}); oracle misconfigured"
        )),
        other => other,
    })
}

/// Linear problem with constant decay run through the production driver as
/// a fine-step reference; returns the field at `t_end`.
pub fn linear_reference(problem: &LinearTestProblem, dt0: f64, t_end: f64) -> Result<(Mesh, Vec<f64>)> {
    let mesh = problem.mesh()?;
    let op = problem.operator(&mesh)?;
    let model: SharedModel = Arc::new(LinearDecay::new(problem.a, dt0));
    let mut state = NodeStateArray::new(mesh.n_nodes(), &vec![0; mesh.n_nodes()], &[(model.clone(), 0.0, vec![0.0])])?;
    state.v = problem.initial(&mesh);
    if t_end == 0.0 {
        return Ok((mesh, state.v));
    }
    let res = reference_solution(&op, vec![model], state, &Protocol::default(), t_end, t_end, &RunOptions::default())?;
    Ok((mesh, res.final_state.v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_dense() {
        let mesh = build_regular_sheet(0.5, 0.3, 0.05, 0.4).unwrap();
        let op = assemble(&mesh, &build_diffusion_field(&mesh, 0.002, 0.0005, 0.25).unwrap()).unwrap();
        let dense = *dense_eigenvalues(&op).last().unwrap();
        let sb = spectral_bound(&op).unwrap();
        assert!((sb.lambda_max - dense).abs() <= 1e-5 * dense, "{} vs {dense}", sb.lambda_max);
        assert!(sb.critical_step >= op.dt_s / 0.9);
    }

    #[test]
    fn dense_spectrum_is_nonnegative_with_zero_mode() {
        let mesh = build_regular_sheet(0.3, 0.2, 0.05, 0.0).unwrap();
        let op = assemble(&mesh, &build_diffusion_field(&mesh, 0.001, 0.001, 1.0).unwrap()).unwrap();
        let ev = dense_eigenvalues(&op);
        assert!(ev[0].abs() < 1e-9 * ev.last().unwrap());
        assert!(ev[1] > 0.0);
    }

    #[test]
    fn propagator_semigroup() {
        let p = LinearTestProblem::default();
        let mesh = p.mesh().unwrap();
        let op = p.operator(&mesh).unwrap();
        let prop = LinearPropagator::new(&op, &p.decay(&mesh));
        let u0 = p.initial(&mesh);
        let once = prop.apply(&u0, 2.0);
        let twice = prop.apply(&prop.apply(&u0, 1.0), 1.0);
        let err = once.iter().zip(&twice).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        let err0 = prop.apply(&u0, 0.0).iter().zip(&u0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err0 < 1e-12);
    }

    #[test]
    fn constant_decay_commutes() {
        let p = LinearTestProblem {
            a_variation: 0.0,
            ..LinearTestProblem::default()
        };
        let mesh = p.mesh().unwrap();
        let op = p.operator(&mesh).unwrap();
        let exact = LinearPropagator::new(&op, &p.decay(&mesh)).apply(&p.initial(&mesh), 4.0);
        let split = split_solution(&p, &mesh, &op, SubIntegrator::Exact, 2.0, 4.0).unwrap();
        let err = split.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }

    #[test]
    fn linear_decay_model() {
        let m = LinearDecay::new(0.3, 0.5);
        let mut ds = [1.0];
        assert!((m.rates(2.0, &[0.0], 0.5, &mut ds) + 0.1).abs() < 1e-15);
        assert_eq!(ds[0], 0.0);
    }
}
