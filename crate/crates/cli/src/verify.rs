//! Property suites behind `verify`. Each property reports a measured error
//! and passes when it does not exceed its tolerance.

use std::fmt::Write as _;
use std::path::Path;

use riemod::action::{
    integrate_gradient_flow, integrate_hamilton_equations, neural_flow_problem,
    perturbed_trajectory, FlowProblem, HamiltonianState, QuadraticProblem,
};
use riemod::graph::{Activation, Module, Network, OpKind, ParameterState, Tape};
use riemod::linalg::{cholesky_upper, norm, relative_error, DenseMatrix, DiagonalMatrix};
use riemod::loss::LossKind;
use riemod::metric::{LayerMetric, OutputMetricKind};
use riemod::optimizer::{
    dense_reference_step, riemannian_sgd_step, sgd_baseline_step, OptimizerConfig, Sample,
};
use riemod::rng::SplitMix64;

use crate::artifacts::{fmt_f64, OutputDir};
use crate::config::{RunConfig, VERIFY_SUITES};
use crate::error::{CliError, CliResult};
use crate::run_header;

/// `(property, suite, default tolerance)`.
pub const PROPERTIES: [(&str, &str, f64); 12] = [
    ("woodbury_equivalence", "woodbury", 1e-8),
    ("step_oracle", "step_oracle", 1e-8),
    ("gradient_fd", "gradient", 1e-5),
    ("jacobian_fd", "gradient", 1e-5),
    ("pullback_identity", "pullback", 1e-12),
    ("hamiltonian_quadratic", "hamiltonian", 1e-6),
    ("hamiltonian_network", "hamiltonian", 1e-4),
    ("action_bound", "action", 1e-6),
    ("action_convergence", "action", 1.0),
    ("geodesic_line", "geodesic", 1e-8),
    ("geodesic_energy", "geodesic", 1e-7),
    ("degenerate_identity", "degenerate", 0.0),
];

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub instances: usize,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.measured <= self.tolerance
    }

    /// `tolerance / measured`.
    pub fn margin(&self) -> f64 {
        if self.measured == 0.0 {
            f64::INFINITY
        } else {
            self.tolerance / self.measured
        }
    }
}

pub fn validate(cfg: &RunConfig) -> CliResult<()> {
    let v = &cfg.verify;
    if v.suites.is_empty() {
        return Err(CliError::config("verify.suites selects no suites"));
    }
    for s in &v.suites {
        if !VERIFY_SUITES.contains(&s.as_str()) {
            return Err(CliError::config(format!(
                "unknown verify suite `{s}`; known: {}",
                VERIFY_SUITES.join(", ")
            )));
        }
    }
    for (k, t) in &v.tolerance {
        if !PROPERTIES.iter().any(|(p, _, _)| p == k) {
            return Err(CliError::config(format!(
                "verify.tolerance.{k} names no property"
            )));
        }
        if !(*t >= 0.0 && t.is_finite()) {
            return Err(CliError::config(format!(
                "verify.tolerance.{k} must be finite and ≥ 0"
            )));
        }
    }
    if v.instances == 0 {
        return Err(CliError::config("verify.instances must be at least 1"));
    }
    Ok(())
}

fn random_activation(rng: &mut SplitMix64) -> Activation {
    [Activation::Tanh, Activation::Relu, Activation::Identity][rng.below(3)]
}

fn random_mlp(rng: &mut SplitMix64, max_dim: usize, act: Activation) -> Network {
    let depth = 2 + rng.below(3);
    let dims: Vec<usize> = (0..depth).map(|_| 1 + rng.below(max_dim)).collect();
    Network::new(Module::mlp(&dims, act).expect("valid dims")).expect("valid module")
}

fn near_relu_kink(net: &Network, tape: &Tape, gap: f64) -> bool {
    net.ops().iter().any(|op| {
        matches!(op.kind, OpKind::Pointwise(Activation::Relu))
            && tape
                .activation(op.input.clone())
                .iter()
                .any(|z| z.abs() < gap)
    })
}

pub fn woodbury_equivalence(rng: &mut SplitMix64, instances: usize) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = 1 + rng.below(200);
        let n_o = 1 + rng.below(10);
        let mass = DiagonalMatrix::new((0..n).map(|_| rng.uniform_range(0.1, 2.0)).collect())?;
        let scale = rng.uniform_range(0.1, 3.0);
        let k = DenseMatrix::new(
            n_o,
            n,
            rng.normal_vec(n_o * n).iter().map(|x| scale * x).collect(),
        )?;
        let m = LayerMetric::new(0, mass, k)?;
        let v = rng.normal_vec(n);
        worst = worst.max(relative_error(
            &m.woodbury_apply_inverse(&v)?,
            &m.dense_apply_inverse(&v)?,
        ));
    }
    Ok(worst)
}

fn random_batch(
    rng: &mut SplitMix64,
    net: &Network,
    size: usize,
    classification: bool,
) -> Vec<Sample> {
    (0..size)
        .map(|_| {
            let target = if classification {
                let mut t = vec![0.0; net.output_dim()];
                t[rng.below(net.output_dim())] = 1.0;
                t
            } else {
                rng.normal_vec(net.output_dim())
            };
            Sample::new(rng.normal_vec(net.input_dim()), target)
        })
        .collect()
}

pub fn step_oracle(rng: &mut SplitMix64, instances: usize) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let act = random_activation(rng);
        let net = random_mlp(rng, 5, act);
        let params = net.init_params(rng);
        let classification = i % 2 == 1 && net.output_dim() > 1;
        let size = 1 + rng.below(6);
        let batch = random_batch(rng, &net, size, classification);
        let cfg = OptimizerConfig {
            learning_rate: rng.uniform_range(0.01, 0.5),
            masses: (0..net.layer_count())
                .map(|_| rng.uniform_range(0.1, 2.0))
                .collect(),
            output_metric: if classification {
                OutputMetricKind::GaussNewtonSoftmaxCE
            } else {
                OutputMetricKind::Identity
            },
            epsilon: 1e-3,
            loss: if classification {
                LossKind::SoftmaxCrossEntropy
            } else {
                LossKind::MeanSquaredError
            },
            ..Default::default()
        };
        let (fast, _) = riemannian_sgd_step(&net, &params, &batch, &cfg, 0)?;
        let dense = dense_reference_step(&net, &params, &batch, &cfg)?;
        let delta = |p: &ParameterState| -> Vec<f64> {
            p.values()
                .iter()
                .zip(params.values())
                .map(|(a, b)| a - b)
                .collect()
        };
        worst = worst.max(relative_error(&delta(&fast), &delta(&dense)));
    }
    Ok(worst)
}

/// `ℓ(y) = c·y + ½‖y‖²`, so `∂ℓ/∂y = y + c`.
fn probe_loss(y: &[f64], c: &[f64]) -> f64 {
    y.iter().zip(c).map(|(a, b)| a * b + 0.5 * a * a).sum()
}

/// Worst relative errors of backprop gradients and of layer Jacobians
/// against central differences.
pub fn gradient_checks(rng: &mut SplitMix64, instances: usize) -> CliResult<(f64, f64)> {
    let (mut grad_worst, mut jac_worst) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < instances {
        let act = if rng.below(2) == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let net = random_mlp(rng, 16, act);
        let params = net.init_params(rng);
        let x = rng.normal_vec(net.input_dim());
        let c = rng.normal_vec(net.output_dim());
        let (y, tape) = net.forward(&params, &x)?;
        if near_relu_kink(&net, &tape, 1e-3) {
            continue;
        }
        done += 1;
        let dl: Vec<f64> = y.iter().zip(&c).map(|(a, b)| a + b).collect();
        let grad = net.backward_adjoints(&tape, &dl)?.gradient;
        let mut fd = Vec::with_capacity(params.len());
        let mut fd_jac: Vec<Vec<f64>> = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let h = 1e-5 * (1.0 + params.values()[i].abs());
            let mut plus = params.clone();
            plus.values_mut()[i] += h;
            let mut minus = params.clone();
            minus.values_mut()[i] -= h;
            let yp = net.forward(&plus, &x)?.0;
            let ym = net.forward(&minus, &x)?.0;
            fd.push((probe_loss(&yp, &c) - probe_loss(&ym, &c)) / (2.0 * h));
            fd_jac.push(
                yp.iter()
                    .zip(&ym)
                    .map(|(a, b)| (a - b) / (2.0 * h))
                    .collect(),
            );
        }
        if norm(&fd) > 1e-8 {
            grad_worst = grad_worst.max(relative_error(&grad, &fd));
        }
        for jac in net.output_jacobians(&tape)? {
            let range = params.block_range(jac.layer);
            let mut oracle = DenseMatrix::zeros(net.output_dim(), range.len());
            for (col, p) in range.enumerate() {
                for row in 0..net.output_dim() {
                    oracle[(row, col)] = fd_jac[p][row];
                }
            }
            let scale = oracle.frobenius_norm();
            if scale > 1e-8 {
                jac_worst = jac_worst.max(jac.matrix.sub(&oracle)?.frobenius_norm() / scale);
            }
        }
    }
    Ok((grad_worst, jac_worst))
}

/// `L_xᵀL_x` against `JᵀMJ`, with `J` assembled row by row from reverse-mode products.
pub fn pullback_identity(rng: &mut SplitMix64, instances: usize) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let act = random_activation(rng);
        let net = random_mlp(rng, 20, act);
        let params = net.init_params(rng);
        let (_, tape) = net.forward(&params, &rng.normal_vec(net.input_dim()))?;
        let n_o = net.output_dim();
        let b = DenseMatrix::new(n_o, n_o, rng.normal_vec(n_o * n_o))?;
        let mut m = b.tr_matmul(&b)?;
        m.add_diagonal(&vec![0.1; n_o])?;
        let l_o = cholesky_upper(&m)?;
        let l_x = net.pullback_to_input(&tape, l_o.as_matrix())?;
        let mut rows = Vec::with_capacity(n_o);
        for k in 0..n_o {
            let mut e = vec![0.0; n_o];
            e[k] = 1.0;
            rows.push(net.backward_adjoints(&tape, &e)?.input);
        }
        let j = DenseMatrix::from_rows(&rows);
        let lhs = l_x.tr_matmul(&l_x)?;
        let rhs = j.tr_matmul(&m.matmul(&j)?)?;
        let scale = rhs.frobenius_norm();
        if scale > 0.0 {
            worst = worst.max(lhs.sub(&rhs)?.frobenius_norm() / scale);
        }
    }
    Ok(worst)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `max|H| / max|L|` along RK4 gradient flow at `Δs = 1e-3`.
pub fn hamiltonian_on_quadratics(rng: &mut SplitMix64, problems: usize) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for i in 0..problems {
        let conformal = if i % 2 == 0 {
            None
        } else {
            Some(rng.uniform_range(0.05, 0.5))
        };
        let n = 2 + rng.below(5);
        let eta = rng.uniform_range(0.3, 2.0);
        let p = QuadraticProblem::random(rng, n, eta, conformal)?;
        let traj = integrate_gradient_flow(&p, &rng.normal_vec(n), 2.0, 1e-3)?;
        let scale = max_abs(&traj.lagrangian);
        if scale > 0.0 {
            worst = worst.max(traj.max_abs_hamiltonian() / scale);
        }
    }
    Ok(worst)
}

/// Same ratio on a 2-layer tanh network (under 50 parameters).
pub fn hamiltonian_on_network(rng: &mut SplitMix64) -> CliResult<f64> {
    let net = Network::new(Module::mlp(&[3, 4, 2], Activation::Tanh)?)?;
    let phi0 = net.init_params(rng).values().to_vec();
    let batch = random_batch(rng, &net, 4, false);
    let cfg = OptimizerConfig {
        masses: vec![0.5],
        ..Default::default()
    };
    let p = neural_flow_problem(net, batch, LossKind::MeanSquaredError, cfg, 1.0)?;
    let traj = integrate_gradient_flow(&p, &phi0, 0.2, 1e-3)?;
    Ok(traj.max_abs_hamiltonian() / max_abs(&traj.lagrangian).max(f64::MIN_POSITIVE))
}

/// Returns the worst relative deficit of `S` below `η|Δh|` beyond the
/// quadrature estimate, and the worst `|ratio − 4|` of flow excesses at
/// `Δs = 0.04` and `0.02`.
pub fn action_checks(
    rng: &mut SplitMix64,
    problems: usize,
    perturbations: usize,
) -> CliResult<(f64, f64)> {
    let (mut deficit, mut ratio_err) = (0.0f64, 0.0f64);
    for i in 0..problems {
        let n = 2 + rng.below(4);
        let eta = rng.uniform_range(0.5, 1.5);
        let conformal = if i % 2 == 0 { None } else { Some(0.1) };
        let p = QuadraticProblem::random(rng, n, eta, conformal)?;
        let phi0 = rng.normal_vec(n);
        let traj = integrate_gradient_flow(&p, &phi0, 2.0, 1e-3)?;
        let lower = traj.potential_drop(eta);
        let quad = (traj.action() - traj.coarse_action()).abs();
        let mut check = |s: f64| {
            deficit = deficit.max((lower - s - quad).max(0.0) / lower.max(f64::MIN_POSITIVE))
        };
        check(traj.action());
        for _ in 0..perturbations {
            let dir = rng.normal_vec(n);
            let pert = perturbed_trajectory(&p, &traj, rng.uniform_range(1e-2, 0.3), &dir)?;
            check(pert.action());
        }
        if conformal.is_none() {
            let excess = |ds: f64| -> CliResult<f64> {
                let t = integrate_gradient_flow(&p, &phi0, 2.0, ds)?;
                Ok(t.action() - t.potential_drop(eta))
            };
            let ratio = excess(0.04)? / excess(0.02)?;
            ratio_err = ratio_err.max(if ratio.is_finite() {
                (ratio - 4.0).abs()
            } else {
                f64::INFINITY
            });
        }
    }
    Ok((deficit, ratio_err))
}

/// Worst deviation from the straight line `φ₀ + s g⁻¹p₀` and worst energy drift,
/// with `η = 0` over the unit interval.
pub fn geodesic_checks(rng: &mut SplitMix64, instances: usize) -> CliResult<(f64, f64)> {
    let (mut line, mut drift) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let n = 2 + rng.below(4);
        let conformal = if i % 2 == 0 {
            None
        } else {
            Some(rng.uniform_range(0.05, 0.3))
        };
        let p = QuadraticProblem::random(rng, n, 0.0, conformal)?;
        let init = HamiltonianState {
            phi: rng.normal_vec(n),
            p: rng.normal_vec(n),
        };
        let traj = integrate_hamilton_equations(&p, &init, 1.0, 1e-3)?;
        drift = drift.max(traj.max_energy_drift());
        if conformal.is_none() {
            let v = p.inverse_metric_apply(&init.phi, &init.p)?;
            for (s, st) in traj.s.iter().zip(&traj.states) {
                for ((x, x0), d) in st.phi.iter().zip(&init.phi).zip(&v) {
                    line = line.max((x - (x0 + s * d)).abs());
                }
            }
        }
    }
    Ok((line, drift))
}

/// Largest absolute difference between the Riemannian step with `K = 0`,
/// `D = I` and the plain SGD step.
pub fn degenerate_identity(rng: &mut SplitMix64, instances: usize) -> CliResult<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let act = random_activation(rng);
        let net = random_mlp(rng, 8, act);
        let params = net.init_params(rng);
        let size = 1 + rng.below(8);
        let batch = random_batch(rng, &net, size, false);
        let cfg = OptimizerConfig {
            learning_rate: rng.uniform_range(0.01, 1.0),
            masses: vec![1.0],
            pullback: false,
            ..Default::default()
        };
        let (a, _) = riemannian_sgd_step(&net, &params, &batch, &cfg, 0)?;
        let (b, _) = sgd_baseline_step(&net, &params, &batch, cfg.learning_rate, cfg.loss, 0)?;
        for (x, y) in a.values().iter().zip(b.values()) {
            if x.to_bits() != y.to_bits() {
                worst = worst.max((x - y).abs()).max(f64::MIN_POSITIVE);
            }
        }
    }
    Ok(worst)
}

/// Runs the selected suites with the configured tolerances.
pub fn run_suites(cfg: &RunConfig) -> CliResult<Vec<PropertyResult>> {
    let v = &cfg.verify;
    let mut rng = SplitMix64::new(cfg.seed);
    let tol = |name: &str| {
        v.tolerance.get(name).copied().unwrap_or_else(|| {
            PROPERTIES
                .iter()
                .find(|(p, _, _)| *p == name)
                .map(|p| p.2)
                .expect("known property")
        })
    };
    let n = v.instances;
    let mut out = Vec::new();
    let mut push = |name: &str, measured: f64, instances: usize| {
        out.push(PropertyResult {
            name: name.to_string(),
            measured,
            tolerance: tol(name),
            instances,
        })
    };
    for suite in VERIFY_SUITES
        .iter()
        .filter(|s| v.suites.iter().any(|x| x == *s))
    {
        log::info!("verify suite {suite}");
        let mut rng = rng.fork();
        match *suite {
            "woodbury" => push(
                "woodbury_equivalence",
                woodbury_equivalence(&mut rng, 5 * n)?,
                5 * n,
            ),
            "step_oracle" => push("step_oracle", step_oracle(&mut rng, n)?, n),
            "gradient" => {
                let (g, j) = gradient_checks(&mut rng, n)?;
                push("gradient_fd", g, n);
                push("jacobian_fd", j, n);
            }
            "pullback" => push(
                "pullback_identity",
                pullback_identity(&mut rng, 2 * n)?,
                2 * n,
            ),
            "hamiltonian" => {
                push(
                    "hamiltonian_quadratic",
                    hamiltonian_on_quadratics(&mut rng, 4)?,
                    4,
                );
                push("hamiltonian_network", hamiltonian_on_network(&mut rng)?, 1);
            }
            "action" => {
                let (d, r) = action_checks(&mut rng, 4, 10)?;
                push("action_bound", d, 4 * 11);
                push("action_convergence", r, 2);
            }
            "geodesic" => {
                let (l, d) = geodesic_checks(&mut rng, 4)?;
                push("geodesic_line", l, 2);
                push("geodesic_energy", d, 4);
            }
            "degenerate" => push("degenerate_identity", degenerate_identity(&mut rng, n)?, n),
            _ => unreachable!("suites validated"),
        }
    }
    Ok(out)
}

pub fn report_text(header: &str, results: &[PropertyResult]) -> String {
    let mut out = header.to_string();
    let passed = results.iter().filter(|r| r.passed()).count();
    let _ = writeln!(out, "# passed = {passed}/{}", results.len());
    out.push_str("status,property,measured,tolerance,margin,instances\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            fmt_f64(r.measured),
            fmt_f64(r.tolerance),
            fmt_f64(r.margin()),
            r.instances
        );
    }
    out
}

/// Writes `verify.txt`; any failing property is a verification failure.
pub fn run_verify(cfg: RunConfig, out: &Path) -> CliResult<Vec<PropertyResult>> {
    validate(&cfg)?;
    let header = run_header(&cfg, "verify");
    let dir = OutputDir::create(out)?;
    let results = run_suites(&cfg)?;
    dir.write("verify.txt", report_text(&header, &results).as_bytes())?;
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::VerificationFailed(format!(
            "failing properties: {}",
            failed.join(", ")
        )))
    }
}
