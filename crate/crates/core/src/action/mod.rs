//! Action functional, Hamiltonian and their flows for a potential on a
//! Riemannian manifold.

mod problem;

pub use problem::{
    neural_flow_problem, FlowProblem, MetricField, NeuralFlowProblem, QuadraticProblem, FD_STEP,
    NEURAL_FLOW_MAX_PARAMS,
};

use std::fmt::Write as _;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{self, dot};

/// Sampled path `φ(s)` with velocities and the pointwise Lagrangian,
/// Hamiltonian and potential.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub s: Vec<f64>,
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub lagrangian: Vec<f64>,
    pub hamiltonian: Vec<f64>,
    pub potential: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianState {
    pub phi: Vec<f64>,
    pub p: Vec<f64>,
}

/// Phase-space path from Hamilton's equations.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTrajectory {
    pub s: Vec<f64>,
    pub states: Vec<HamiltonianState>,
    pub hamiltonian: Vec<f64>,
}

/// `L = ½ φ̇ᵀ g φ̇ + ½ η² ∇hᵀ g⁻¹ ∇h`.
pub fn lagrangian<P: FlowProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    velocity: &[f64],
) -> Result<f64> {
    let g = problem.metric(phi)?;
    let grad = problem.gradient(phi)?;
    let ginv_grad = linalg::solve_spd(&g, &grad)?;
    let eta = problem.eta();
    Ok(0.5 * dot(velocity, &g.matvec(velocity)?) + 0.5 * eta * eta * dot(&grad, &ginv_grad))
}

/// Factored Hamiltonian `½ g^{IJ}(p − η∂h)_I (p + η∂h)_J`.
pub fn evaluate_hamiltonian<P: FlowProblem + ?Sized>(
    problem: &P,
    state: &HamiltonianState,
) -> Result<f64> {
    check_dim("hamiltonian momentum", problem.dim(), state.p.len())?;
    let grad = problem.gradient(&state.phi)?;
    let eta = problem.eta();
    let minus: Vec<f64> = state
        .p
        .iter()
        .zip(&grad)
        .map(|(p, g)| p - eta * g)
        .collect();
    let plus: Vec<f64> = state
        .p
        .iter()
        .zip(&grad)
        .map(|(p, g)| p + eta * g)
        .collect();
    Ok(0.5 * dot(&minus, &problem.inverse_metric_apply(&state.phi, &plus)?))
}

/// Gradient-flow vector field `−η g⁻¹ ∇h`.
pub fn flow_velocity<P: FlowProblem + ?Sized>(problem: &P, phi: &[f64]) -> Result<Vec<f64>> {
    let grad = problem.gradient(phi)?;
    let eta = problem.eta();
    let mut v = problem.inverse_metric_apply(phi, &grad)?;
    v.iter_mut().for_each(|x| *x *= -eta);
    Ok(v)
}

/// Canonical momentum `p = g φ̇`.
pub fn momentum<P: FlowProblem + ?Sized>(
    problem: &P,
    phi: &[f64],
    velocity: &[f64],
) -> Result<Vec<f64>> {
    problem.metric(phi)?.matvec(velocity)
}

fn rk4_step<F>(x: &[f64], ds: f64, f: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let shifted =
        |k: &[f64], c: f64| -> Vec<f64> { x.iter().zip(k).map(|(xi, ki)| xi + c * ki).collect() };
    let k1 = f(x)?;
    let k2 = f(&shifted(&k1, 0.5 * ds))?;
    let k3 = f(&shifted(&k2, 0.5 * ds))?;
    let k4 = f(&shifted(&k3, ds))?;
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + ds / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    check_finite("rk4 state", &out)?;
    Ok(out)
}

fn step_count(s_end: f64, ds: f64) -> Result<usize> {
    if !(ds > 0.0 && s_end >= 0.0 && s_end.is_finite()) {
        return Err(Error::InvalidArgument(
            "need ds > 0 and a finite s_end ≥ 0".into(),
        ));
    }
    Ok((s_end / ds).round() as usize)
}

impl Trajectory {
    /// Evaluates `L`, `H` and `h` along a sampled path.
    pub fn from_path<P: FlowProblem + ?Sized>(
        problem: &P,
        s: Vec<f64>,
        positions: Vec<Vec<f64>>,
        velocities: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_dim("trajectory velocities", positions.len(), velocities.len())?;
        check_dim("trajectory times", positions.len(), s.len())?;
        let mut lag = Vec::with_capacity(s.len());
        let mut ham = Vec::with_capacity(s.len());
        let mut pot = Vec::with_capacity(s.len());
        for (phi, v) in positions.iter().zip(&velocities) {
            lag.push(lagrangian(problem, phi, v)?);
            let state = HamiltonianState {
                phi: phi.clone(),
                p: momentum(problem, phi, v)?,
            };
            ham.push(evaluate_hamiltonian(problem, &state)?);
            pot.push(problem.potential(phi)?);
        }
        Ok(Self {
            s,
            positions,
            velocities,
            lagrangian: lag,
            hamiltonian: ham,
            potential: pot,
        })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Trapezoid rule for `∫ L ds` on the sample grid.
    pub fn action(&self) -> f64 {
        trapezoid(&self.s, &self.lagrangian)
    }

    /// Trapezoid action on every other sample; with [`Trajectory::action`]
    /// this gives a Richardson estimate of the quadrature error.
    pub fn coarse_action(&self) -> f64 {
        let s: Vec<f64> = self.s.iter().step_by(2).copied().collect();
        let l: Vec<f64> = self.lagrangian.iter().step_by(2).copied().collect();
        trapezoid(&s, &l)
    }

    /// `η |h(φ(T)) − h(φ(0))|`.
    pub fn potential_drop(&self, eta: f64) -> f64 {
        match (self.potential.first(), self.potential.last()) {
            (Some(a), Some(b)) => eta * (b - a).abs(),
            _ => 0.0,
        }
    }

    pub fn max_abs_hamiltonian(&self) -> f64 {
        self.hamiltonian.iter().fold(0.0, |m, h| m.max(h.abs()))
    }

    /// CSV with columns `s, phi_0 … phi_{n−1}, L, H, h`.
    pub fn to_csv(&self) -> String {
        let n = self.positions.first().map_or(0, Vec::len);
        let mut out = String::from("s");
        for i in 0..n {
            let _ = write!(out, ",phi_{i}");
        }
        out.push_str(",L,H,h\n");
        for k in 0..self.len() {
            let _ = write!(out, "{:.16e}", self.s[k]);
            for x in &self.positions[k] {
                let _ = write!(out, ",{x:.16e}");
            }
            let _ = writeln!(
                out,
                ",{:.16e},{:.16e},{:.16e}",
                self.lagrangian[k], self.hamiltonian[k], self.potential[k]
            );
        }
        out
    }
}

pub fn trapezoid(s: &[f64], f: &[f64]) -> f64 {
    s.windows(2)
        .zip(f.windows(2))
        .map(|(sw, fw)| 0.5 * (sw[1] - sw[0]) * (fw[0] + fw[1]))
        .sum()
}

/// RK4 on `φ̇ = −η g⁻¹ ∇h` over `[0, s_end]`. Velocities are the vector
/// field at each sample.
pub fn integrate_gradient_flow<P: FlowProblem + ?Sized>(
    problem: &P,
    phi0: &[f64],
    s_end: f64,
    ds: f64,
) -> Result<Trajectory> {
    check_dim("flow initial point", problem.dim(), phi0.len())?;
    let steps = step_count(s_end, ds)?;
    let field = |x: &[f64]| flow_velocity(problem, x);
    let mut positions = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    let mut s = Vec::with_capacity(steps + 1);
    let mut x = phi0.to_vec();
    for k in 0..=steps {
        s.push(k as f64 * ds);
        velocities.push(field(&x)?);
        positions.push(x.clone());
        if k < steps {
            x = rk4_step(&x, ds, &field)?;
        }
    }
    Trajectory::from_path(problem, s, positions, velocities)
}

/// First grid time at which the RK4 gradient flow reaches `‖∇h‖ ≤ grad_tol`.
/// Fails past `max_s`.
pub fn settling_time<P: FlowProblem + ?Sized>(
    problem: &P,
    phi0: &[f64],
    ds: f64,
    grad_tol: f64,
    max_s: f64,
) -> Result<f64> {
    let field = |x: &[f64]| flow_velocity(problem, x);
    let mut x = phi0.to_vec();
    let mut s = 0.0;
    let mut k = 0usize;
    while linalg::norm(&problem.gradient(&x)?) > grad_tol {
        if s >= max_s {
            return Err(Error::InvalidArgument(format!(
                "gradient flow did not reach ‖∇h‖ ≤ {grad_tol:e} by s = {max_s}"
            )));
        }
        x = rk4_step(&x, ds, &field)?;
        k += 1;
        s = k as f64 * ds;
    }
    Ok(s)
}

/// Right-hand side of Hamilton's equations from the factored Hamiltonian:
/// `φ̇ = g⁻¹p`,
/// `ṗ_I = −½ g^{KL}_{,I} p_K p_L + ½ η² g^{KL}_{,I} ∂_K h ∂_L h + η² ∂_I∂_K h g^{KL} ∂_L h`.
pub fn hamilton_rhs<P: FlowProblem + ?Sized>(
    problem: &P,
    state: &HamiltonianState,
) -> Result<HamiltonianState> {
    let phi = &state.phi;
    let eta2 = problem.eta() * problem.eta();
    let phi_dot = problem.inverse_metric_apply(phi, &state.p)?;
    let mut p_dot = problem.inverse_metric_form_gradient(phi, &state.p)?;
    p_dot.iter_mut().for_each(|x| *x *= -0.5);
    if eta2 > 0.0 {
        let grad = problem.gradient(phi)?;
        let dg = problem.inverse_metric_form_gradient(phi, &grad)?;
        let w = problem.inverse_metric_apply(phi, &grad)?;
        let hw = problem.hessian_vector(phi, &w)?;
        for i in 0..p_dot.len() {
            p_dot[i] += 0.5 * eta2 * dg[i] + eta2 * hw[i];
        }
    }
    Ok(HamiltonianState {
        phi: phi_dot,
        p: p_dot,
    })
}

/// RK4 on Hamilton's equations over `[0, s_end]`.
pub fn integrate_hamilton_equations<P: FlowProblem + ?Sized>(
    problem: &P,
    initial: &HamiltonianState,
    s_end: f64,
    ds: f64,
) -> Result<PhaseTrajectory> {
    let n = problem.dim();
    check_dim("hamilton initial position", n, initial.phi.len())?;
    check_dim("hamilton initial momentum", n, initial.p.len())?;
    let steps = step_count(s_end, ds)?;
    let field = |x: &[f64]| -> Result<Vec<f64>> {
        let state = HamiltonianState {
            phi: x[..n].to_vec(),
            p: x[n..].to_vec(),
        };
        let d = hamilton_rhs(problem, &state)?;
        Ok([d.phi, d.p].concat())
    };
    let mut x = [initial.phi.clone(), initial.p.clone()].concat();
    let mut out = PhaseTrajectory {
        s: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        hamiltonian: Vec::with_capacity(steps + 1),
    };
    for k in 0..=steps {
        let state = HamiltonianState {
            phi: x[..n].to_vec(),
            p: x[n..].to_vec(),
        };
        out.s.push(k as f64 * ds);
        out.hamiltonian.push(evaluate_hamiltonian(problem, &state)?);
        out.states.push(state);
        if k < steps {
            x = rk4_step(&x, ds, &field)?;
        }
    }
    Ok(out)
}

impl PhaseTrajectory {
    pub fn max_energy_drift(&self) -> f64 {
        let h0 = self.hamiltonian.first().copied().unwrap_or(0.0);
        self.hamiltonian
            .iter()
            .fold(0.0, |m, h| m.max((h - h0).abs()))
    }
}

/// `φ(s) + ε sin(π s / T) v` on the grid of `base`, with analytic velocities.
/// Endpoints are unchanged.
pub fn perturbed_trajectory<P: FlowProblem + ?Sized>(
    problem: &P,
    base: &Trajectory,
    epsilon: f64,
    direction: &[f64],
) -> Result<Trajectory> {
    let t0 = base.s.first().copied().unwrap_or(0.0);
    let span = base.s.last().copied().unwrap_or(0.0) - t0;
    if !(span > 0.0) {
        return Err(Error::InvalidArgument(
            "perturbation needs a non-empty interval".into(),
        ));
    }
    let w = std::f64::consts::PI / span;
    let mut positions = Vec::with_capacity(base.len());
    let mut velocities = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let arg = w * (base.s[k] - t0);
        let bump = if k == 0 || k + 1 == base.len() {
            0.0
        } else {
            epsilon * arg.sin()
        };
        let dbump = epsilon * w * arg.cos();
        positions.push(
            base.positions[k]
                .iter()
                .zip(direction)
                .map(|(x, d)| x + bump * d)
                .collect(),
        );
        velocities.push(
            base.velocities[k]
                .iter()
                .zip(direction)
                .map(|(x, d)| x + dbump * d)
                .collect(),
        );
    }
    Trajectory::from_path(problem, base.s.clone(), positions, velocities)
}

/// Discrete action `Σ_k Δs · L(φ_{k+½}, (φ_{k+1} − φ_k)/Δs)` on a uniform grid.
pub fn discrete_action<P: FlowProblem + ?Sized>(
    problem: &P,
    positions: &[Vec<f64>],
    ds: f64,
) -> Result<f64> {
    let mut total = 0.0;
    for w in positions.windows(2) {
        let mid: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect();
        let vel: Vec<f64> = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a) / ds).collect();
        total += ds * lagrangian(problem, &mid, &vel)?;
    }
    Ok(total)
}

/// Largest `|∂S_Δ/∂φ_k| / Δs` over interior samples, with the derivative of
/// the midpoint discrete action taken by central differences on the two
/// adjacent segments.
pub fn euler_lagrange_residual<P: FlowProblem + ?Sized>(
    problem: &P,
    positions: &[Vec<f64>],
    ds: f64,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 1..positions.len().saturating_sub(1) {
        let mut local = positions[k - 1..=k + 1].to_vec();
        for i in 0..problem.dim() {
            let x = local[1][i];
            let h = FD_STEP * (1.0 + x.abs());
            local[1][i] = x + h;
            let sp = discrete_action(problem, &local, ds)?;
            local[1][i] = x - h;
            let sm = discrete_action(problem, &local, ds)?;
            local[1][i] = x;
            worst = worst.max(((sp - sm) / (2.0 * h)).abs() / ds);
        }
    }
    Ok(worst)
}
