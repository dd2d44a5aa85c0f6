//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to the real
//! stdout and then asserts. A shared lock runs them one at a time so the
//! timing criteria are not disturbed by the others.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use riemod::action::{
    integrate_gradient_flow, integrate_hamilton_equations, neural_flow_problem, FlowProblem,
    HamiltonianState, QuadraticProblem,
};
use riemod::graph::{Activation, Module, Network, ParameterState};
use riemod::linalg::{cholesky_upper, DenseMatrix, DiagonalMatrix};
use riemod::loss::LossKind;
use riemod::metric::{LayerMetric, OutputMetricKind};
use riemod::optimizer::{riemannian_sgd_step, sgd_baseline_step, OptimizerConfig, Sample};
use riemod::rng::SplitMix64;
use riemod_cli::bench;
use riemod_cli::config::BenchSection;

static SERIAL: Mutex<()> = Mutex::new(());

fn report(
    id: u32,
    name: &str,
    passed: bool,
    detail: &str,
    elapsed: Duration,
    budget_s: f64,
) -> bool {
    let ok = passed && elapsed.as_secs_f64() < budget_s;
    let line = format!(
        "{} [{id:>2}] {name}: {detail}; {:.2} s (budget {budget_s} s)\n",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    ok
}

// ---- test-side linear algebra ----

type Mat = Vec<Vec<f64>>;

fn gauss_solve(mut a: Mat, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f != 0.0 {
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

fn to_mat(m: &DenseMatrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = b.first().map_or(0, Vec::len);
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, Vec::len);
    (0..cols)
        .map(|j| a.iter().map(|r| r[j]).collect())
        .collect()
}

fn matvec(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter().map(|r| dot(r, v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&d) / norm(b).max(f64::MIN_POSITIVE)
}

fn frobenius(a: &Mat) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    let diff: Mat = a
        .iter()
        .zip(b)
        .map(|(r, s)| r.iter().zip(s).map(|(x, y)| x - y).collect())
        .collect();
    frobenius(&diff) / frobenius(b).max(f64::MIN_POSITIVE)
}

// ---- test-side MLP ----

struct Mlp {
    dims: Vec<usize>,
    act: Activation,
}

fn act_apply(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Tanh => x.tanh(),
        Activation::Relu => x.max(0.0),
        Activation::Identity => x,
    }
}

fn act_slope(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Tanh => 1.0 - x.tanh().powi(2),
        Activation::Relu => f64::from(u8::from(x > 0.0)),
        Activation::Identity => 1.0,
    }
}

impl Mlp {
    fn random(rng: &mut SplitMix64, max_dim: usize, act: Activation, max_params: usize) -> Self {
        loop {
            let depth = 2 + rng.below(3);
            let dims: Vec<usize> = (0..depth).map(|_| 1 + rng.below(max_dim)).collect();
            let m = Self { dims, act };
            if m.param_count() <= max_params {
                return m;
            }
        }
    }

    fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn network(&self) -> Network {
        Network::new(Module::mlp(&self.dims, self.act).unwrap()).unwrap()
    }

    /// Weight matrices and biases from the flat parameter vector
    /// (row-major weights, then bias, per layer).
    fn unpack(&self, p: &[f64]) -> Vec<(Mat, Vec<f64>)> {
        let mut at = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let m: Mat = (0..o)
                    .map(|r| p[at + r * i..at + (r + 1) * i].to_vec())
                    .collect();
                at += i * o;
                let b = p[at..at + o].to_vec();
                at += o;
                (m, b)
            })
            .collect()
    }

    /// Output and the hidden pre-activations.
    fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let layers = self.unpack(p);
        let mut h = x.to_vec();
        let mut pre = Vec::new();
        for (k, (w, b)) in layers.iter().enumerate() {
            let z: Vec<f64> = matvec(w, &h).iter().zip(b).map(|(a, c)| a + c).collect();
            if k + 1 < layers.len() {
                h = z.iter().map(|v| act_apply(self.act, *v)).collect();
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, pre)
    }

    /// `∂y/∂x` as a product of weight matrices and activation slopes.
    fn input_jacobian(&self, p: &[f64], x: &[f64]) -> Mat {
        let layers = self.unpack(p);
        let (_, pre) = self.forward(p, x);
        let mut j = layers[0].0.clone();
        for (k, (w, _)) in layers.iter().enumerate().skip(1) {
            let scaled: Mat = j
                .iter()
                .zip(&pre[k - 1])
                .map(|(row, z)| row.iter().map(|v| v * act_slope(self.act, *z)).collect())
                .collect();
            j = matmul(w, &scaled);
        }
        j
    }

    fn near_kink(&self, p: &[f64], x: &[f64], gap: f64) -> bool {
        self.act == Activation::Relu && self.forward(p, x).1.iter().flatten().any(|z| z.abs() < gap)
    }
}

fn random_act(rng: &mut SplitMix64) -> Activation {
    [Activation::Tanh, Activation::Relu, Activation::Identity][rng.below(3)]
}

fn softmax(y: &[f64]) -> Vec<f64> {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

// ---- criteria ----

#[test]
fn criterion_01_woodbury_equivalence() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(101);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let n = 1 + rng.below(200);
        let r = 1 + rng.below(10);
        let d: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 2.0)).collect();
        let scale = rng.uniform_range(0.1, 3.0);
        let k: Vec<f64> = rng
            .normal_vec(r * n)
            .into_iter()
            .map(|x| scale * x)
            .collect();
        let v = rng.normal_vec(n);
        let metric = LayerMetric::new(
            0,
            DiagonalMatrix::new(d.clone()).unwrap(),
            DenseMatrix::new(r, n, k.clone()).unwrap(),
        )
        .unwrap();
        let got = metric.woodbury_apply_inverse(&v).unwrap();
        let mut g = vec![vec![0.0; n]; n];
        for i in 0..n {
            g[i][i] = d[i];
            for j in 0..n {
                g[i][j] += (0..r).map(|q| k[q * n + i] * k[q * n + j]).sum::<f64>();
            }
        }
        worst = worst.max(rel_err(&got, &gauss_solve(g, v)));
    }
    let ok = report(
        1,
        "woodbury equivalence",
        worst <= 1e-8,
        &format!("500 instances, max rel err {worst:.3e} (tol 1e-8)"),
        start.elapsed(),
        30.0,
    );
    assert!(ok);
}

#[test]
fn criterion_02_step_oracle() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(202);
    let mut worst = 0.0f64;
    for inst in 0..100 {
        let act = random_act(&mut rng);
        let mlp = Mlp::random(&mut rng, 6, act, 100);
        let net = mlp.network();
        assert_eq!(net.param_count(), mlp.param_count());
        let params = net.init_params(&mut rng);
        let n_o = net.output_dim();
        let classify = inst % 2 == 1 && n_o > 1;
        let batch: Vec<Sample> = (0..1 + rng.below(6))
            .map(|_| {
                let x = rng.normal_vec(net.input_dim());
                let t = if classify {
                    let mut t = vec![0.0; n_o];
                    t[rng.below(n_o)] = 1.0;
                    t
                } else {
                    rng.normal_vec(n_o)
                };
                Sample::new(x, t)
            })
            .collect();
        let eta = rng.uniform_range(0.01, 0.5);
        let masses: Vec<f64> = (0..net.layer_count())
            .map(|_| rng.uniform_range(0.1, 2.0))
            .collect();
        let eps = 1e-3;
        let cfg = OptimizerConfig {
            learning_rate: eta,
            masses: masses.clone(),
            output_metric: if classify {
                OutputMetricKind::GaussNewtonSoftmaxCE
            } else {
                OutputMetricKind::Identity
            },
            epsilon: eps,
            loss: if classify {
                LossKind::SoftmaxCrossEntropy
            } else {
                LossKind::MeanSquaredError
            },
            ..Default::default()
        };
        let (next, _) = riemannian_sgd_step(&net, &params, &batch, &cfg, 0).unwrap();

        // Per layer: G = m I + (1/B) Σ Jᵢᵀ Mᵢ Jᵢ, gradient (1/B) Σ Jᵢᵀ ∂ℓᵢ/∂y.
        let sizes = net.layer_sizes().to_vec();
        let bsz = batch.len() as f64;
        let mut metrics: Vec<Mat> = sizes.iter().map(|&s| vec![vec![0.0; s]; s]).collect();
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
        for s in &batch {
            let (y, tape) = net.forward(&params, &s.input).unwrap();
            let (y_ref, _) = mlp.forward(params.values(), &s.input);
            assert!(rel_err(&y, &y_ref) < 1e-12);
            let (dl, m): (Vec<f64>, Mat) = if classify {
                let p = softmax(&y);
                let dl = p.iter().zip(&s.target).map(|(a, b)| a - b).collect();
                let m = (0..n_o)
                    .map(|i| {
                        (0..n_o)
                            .map(|j| {
                                if i == j {
                                    p[i] - p[i] * p[j] + eps
                                } else {
                                    -p[i] * p[j]
                                }
                            })
                            .collect()
                    })
                    .collect();
                (dl, m)
            } else {
                let dl = y.iter().zip(&s.target).map(|(a, b)| a - b).collect();
                let m = (0..n_o)
                    .map(|i| (0..n_o).map(|j| f64::from(u8::from(i == j))).collect())
                    .collect();
                (dl, m)
            };
            for jac in net.output_jacobians(&tape).unwrap() {
                let j = to_mat(&jac.matrix);
                let jt = transpose(&j);
                let jtmj = matmul(&jt, &matmul(&m, &j));
                let a = jac.layer;
                for (row, src) in metrics[a].iter_mut().zip(&jtmj) {
                    for (x, v) in row.iter_mut().zip(src) {
                        *x += v / bsz;
                    }
                }
                for (g, v) in grads[a].iter_mut().zip(matvec(&jt, &dl)) {
                    *g += v / bsz;
                }
            }
        }
        let mut expected = Vec::new();
        let mut got = Vec::new();
        for a in 0..sizes.len() {
            let mut g = metrics[a].clone();
            for (i, row) in g.iter_mut().enumerate() {
                row[i] += masses[a];
            }
            expected.extend(
                gauss_solve(g, grads[a].clone())
                    .into_iter()
                    .map(|v| -eta * v),
            );
            let range = params.block_range(a);
            got.extend(range.map(|i| next.values()[i] - params.values()[i]));
        }
        worst = worst.max(rel_err(&got, &expected));
    }
    let ok = report(
        2,
        "step oracle",
        worst <= 1e-8,
        &format!("100 instances, max rel err {worst:.3e} (tol 1e-8)"),
        start.elapsed(),
        60.0,
    );
    assert!(ok);
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(303);
    let (mut grad_worst, mut jac_worst) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < 100 {
        let act = if done % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let mlp = Mlp::random(&mut rng, 16, act, usize::MAX);
        let net = mlp.network();
        let params = net.init_params(&mut rng);
        let p = params.values().to_vec();
        let x = rng.normal_vec(net.input_dim());
        if mlp.near_kink(&p, &x, 1e-3) {
            continue;
        }
        done += 1;
        let c = rng.normal_vec(net.output_dim());
        // ℓ(y) = c·y + ½‖y‖².
        let probe = |y: &[f64]| dot(&c, y) + 0.5 * dot(y, y);
        let (y, tape) = net.forward(&params, &x).unwrap();
        let dl: Vec<f64> = y.iter().zip(&c).map(|(a, b)| a + b).collect();
        let grad = net.backward_adjoints(&tape, &dl).unwrap().gradient;
        let mut fd = vec![0.0; p.len()];
        let mut fd_jac = vec![vec![0.0; p.len()]; net.output_dim()];
        for i in 0..p.len() {
            let h = 1e-5 * (1.0 + p[i].abs());
            let mut q = p.clone();
            q[i] = p[i] + h;
            let yp = mlp.forward(&q, &x).0;
            q[i] = p[i] - h;
            let ym = mlp.forward(&q, &x).0;
            fd[i] = (probe(&yp) - probe(&ym)) / (2.0 * h);
            for r in 0..yp.len() {
                fd_jac[r][i] = (yp[r] - ym[r]) / (2.0 * h);
            }
        }
        if norm(&fd) > 1e-8 {
            grad_worst = grad_worst.max(rel_err(&grad, &fd));
        }
        for jac in net.output_jacobians(&tape).unwrap() {
            let range = params.block_range(jac.layer);
            let oracle: Mat = fd_jac.iter().map(|r| r[range.clone()].to_vec()).collect();
            if frobenius(&oracle) > 1e-8 {
                jac_worst = jac_worst.max(rel_frobenius(&to_mat(&jac.matrix), &oracle));
            }
        }
    }
    let worst = grad_worst.max(jac_worst);
    let ok = report(
        3,
        "gradients and layer jacobians vs finite differences",
        worst <= 1e-5,
        &format!("100 MLPs, gradient {grad_worst:.3e}, jacobian {jac_worst:.3e} (tol 1e-5)"),
        start.elapsed(),
        60.0,
    );
    assert!(ok);
}

#[test]
fn criterion_04_cholesky_pullback_identity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(404);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let act = random_act(&mut rng);
        let mlp = Mlp::random(&mut rng, 20, act, usize::MAX);
        let net = mlp.network();
        let params = net.init_params(&mut rng);
        let x = rng.normal_vec(net.input_dim());
        if mlp.near_kink(params.values(), &x, 1e-9) {
            continue;
        }
        let n_o = net.output_dim();
        let b: Mat = (0..n_o).map(|_| rng.normal_vec(n_o)).collect();
        let mut m = matmul(&transpose(&b), &b);
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += 0.1;
        }
        let m_dense = DenseMatrix::from_rows(&m);
        let l_o = cholesky_upper(&m_dense).unwrap();
        let (_, tape) = net.forward(&params, &x).unwrap();
        let l_x = to_mat(&net.pullback_to_input(&tape, l_o.as_matrix()).unwrap());
        let j = mlp.input_jacobian(params.values(), &x);
        let lhs = matmul(&transpose(&l_x), &l_x);
        let rhs = matmul(&transpose(&j), &matmul(&m, &j));
        if frobenius(&rhs) > 0.0 {
            worst = worst.max(rel_frobenius(&lhs, &rhs));
        }
    }
    let ok = report(
        4,
        "cholesky pullback identity",
        worst <= 1e-12,
        &format!("200 chains, max rel frobenius {worst:.3e} (tol 1e-12)"),
        start.elapsed(),
        10.0,
    );
    assert!(ok);
}

/// Velocities by fourth-order central differences of the sampled positions,
/// then `H = ½ φ̇ᵀgφ̇ − ½η² ∇hᵀg⁻¹∇h`. Returns `max|H|` and the largest term.
fn hamiltonian_from_positions<P: FlowProblem>(
    p: &P,
    positions: &[Vec<f64>],
    ds: f64,
) -> (f64, f64) {
    let eta = p.eta();
    let (mut h_max, mut term_max) = (0.0f64, 0.0f64);
    for k in 2..positions.len() - 2 {
        let v: Vec<f64> = (0..p.dim())
            .map(|i| {
                (-positions[k + 2][i] + 8.0 * positions[k + 1][i] - 8.0 * positions[k - 1][i]
                    + positions[k - 2][i])
                    / (12.0 * ds)
            })
            .collect();
        let g = to_mat(&p.metric(&positions[k]).unwrap());
        let grad = p.gradient(&positions[k]).unwrap();
        let kinetic = 0.5 * dot(&v, &matvec(&g, &v));
        let potential = 0.5 * eta * eta * dot(&grad, &gauss_solve(g, grad.clone()));
        h_max = h_max.max((kinetic - potential).abs());
        term_max = term_max.max(kinetic).max(potential);
    }
    (h_max, term_max)
}

#[test]
fn criterion_05_vanishing_hamiltonian() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(505);
    let ds = 1e-3;
    let mut quad_worst = 0.0f64;
    for i in 0..10 {
        let n = 2 + rng.below(5);
        let eta = rng.uniform_range(0.3, 2.0);
        let conformal = (i % 2 == 1).then(|| rng.uniform_range(0.05, 0.5));
        let p = QuadraticProblem::random(&mut rng, n, eta, conformal).unwrap();
        let traj = integrate_gradient_flow(&p, &rng.normal_vec(n), 2.0, ds).unwrap();
        let (h, scale) = hamiltonian_from_positions(&p, &traj.positions, ds);
        quad_worst = quad_worst.max(h / scale);
    }

    let mlp = Mlp {
        dims: vec![3, 4, 2],
        act: Activation::Tanh,
    };
    assert!(mlp.param_count() <= 50);
    let net = mlp.network();
    let phi0 = net.init_params(&mut rng).values().to_vec();
    let batch: Vec<Sample> = (0..4)
        .map(|_| Sample::new(rng.normal_vec(3), rng.normal_vec(2)))
        .collect();
    let cfg = OptimizerConfig {
        masses: vec![0.5],
        ..Default::default()
    };
    let p = neural_flow_problem(net, batch, LossKind::MeanSquaredError, cfg, 1.0).unwrap();
    let traj = integrate_gradient_flow(&p, &phi0, 0.2, ds).unwrap();
    let (h, scale) = hamiltonian_from_positions(&p, &traj.positions, ds);
    let net_ratio = h / scale;

    let ok = report(
        5,
        "vanishing hamiltonian along gradient flow",
        quad_worst <= 1e-6 && net_ratio <= 1e-4,
        &format!("quadratic max|H|/term {quad_worst:.3e} (tol 1e-6), 26-parameter tanh network {net_ratio:.3e} (tol 1e-4)"),
        start.elapsed(),
        120.0,
    );
    assert!(ok);
}

/// Trapezoid action with `L = ½ φ̇ᵀgφ̇ + ½η² ∇hᵀg⁻¹∇h`, at full and at
/// double spacing.
fn action_pair<P: FlowProblem>(p: &P, s: &[f64], phi: &[Vec<f64>], vel: &[Vec<f64>]) -> (f64, f64) {
    let eta = p.eta();
    let lag: Vec<f64> = phi
        .iter()
        .zip(vel)
        .map(|(x, v)| {
            let g = to_mat(&p.metric(x).unwrap());
            let grad = p.gradient(x).unwrap();
            0.5 * dot(v, &matvec(&g, v))
                + 0.5 * eta * eta * dot(&grad, &gauss_solve(g, grad.clone()))
        })
        .collect();
    let trap = |stride: usize| -> f64 {
        let idx: Vec<usize> = (0..s.len()).step_by(stride).collect();
        idx.windows(2)
            .map(|w| 0.5 * (s[w[1]] - s[w[0]]) * (lag[w[0]] + lag[w[1]]))
            .sum()
    };
    (trap(1), trap(2))
}

fn flow_velocity<P: FlowProblem>(p: &P, x: &[f64]) -> Vec<f64> {
    let g = to_mat(&p.metric(x).unwrap());
    gauss_solve(g, p.gradient(x).unwrap())
        .into_iter()
        .map(|v| -p.eta() * v)
        .collect()
}

#[test]
fn criterion_06_action_bound() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(606);
    let (mut worst_deficit, mut ratio_lo, mut ratio_hi) = (0.0f64, f64::INFINITY, 0.0f64);
    let mut checked = 0;
    for i in 0..10 {
        let n = 2 + rng.below(4);
        let eta = rng.uniform_range(0.5, 1.5);
        let conformal = (i % 2 == 1).then_some(0.1);
        let p = QuadraticProblem::random(&mut rng, n, eta, conformal).unwrap();
        let phi0 = rng.normal_vec(n);
        let span = 2.0;
        // Grid with an even number of intervals so the coarse rule lines up.
        let traj = integrate_gradient_flow(&p, &phi0, span, 1e-3).unwrap();
        let vel: Vec<Vec<f64>> = traj
            .positions
            .iter()
            .map(|x| flow_velocity(&p, x))
            .collect();
        let drop = |phi: &[Vec<f64>]| {
            eta * (p.potential(phi.last().unwrap()).unwrap() - p.potential(&phi[0]).unwrap()).abs()
        };
        let lower = drop(&traj.positions);
        let mut check = |phi: &[Vec<f64>], v: &[Vec<f64>]| {
            let (fine, coarse) = action_pair(&p, &traj.s, phi, v);
            let tol = (fine - coarse).abs();
            worst_deficit = worst_deficit.max((lower - fine - tol).max(0.0) / lower);
            checked += 1;
        };
        check(&traj.positions, &vel);
        let w = std::f64::consts::PI / span;
        for _ in 0..50 {
            let dir = rng.normal_vec(n);
            let eps = rng.uniform_range(1e-2, 0.3);
            let mut phi = Vec::with_capacity(traj.s.len());
            let mut v = Vec::with_capacity(traj.s.len());
            for (k, s) in traj.s.iter().enumerate() {
                let bump = if k == 0 || k + 1 == traj.s.len() {
                    0.0
                } else {
                    eps * (w * s).sin()
                };
                let dbump = eps * w * (w * s).cos();
                phi.push(
                    traj.positions[k]
                        .iter()
                        .zip(&dir)
                        .map(|(x, d)| x + bump * d)
                        .collect::<Vec<_>>(),
                );
                v.push(
                    vel[k]
                        .iter()
                        .zip(&dir)
                        .map(|(x, d)| x + dbump * d)
                        .collect::<Vec<_>>(),
                );
            }
            check(&phi, &v);
        }
        let excess = |ds: f64| {
            let t = integrate_gradient_flow(&p, &phi0, span, ds).unwrap();
            let v: Vec<Vec<f64>> = t.positions.iter().map(|x| flow_velocity(&p, x)).collect();
            action_pair(&p, &t.s, &t.positions, &v).0 - drop(&t.positions)
        };
        let ratio = excess(0.04) / excess(0.02);
        ratio_lo = ratio_lo.min(ratio);
        ratio_hi = ratio_hi.max(ratio);
    }
    let ok = report(
        6,
        "action bound and quadrature convergence",
        worst_deficit == 0.0 && (3.0..=5.0).contains(&ratio_lo) && (3.0..=5.0).contains(&ratio_hi),
        &format!("{checked} trajectories, worst relative deficit {worst_deficit:.3e}; excess ratios in [{ratio_lo:.4}, {ratio_hi:.4}] (want [3, 5])"),
        start.elapsed(),
        120.0,
    );
    assert!(ok);
}

#[test]
fn criterion_07_geodesic_limit() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(707);
    let (mut line, mut drift) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let n = 2 + rng.below(4);
        // Odd instances use a position-dependent metric: no straight line, but H is still conserved.
        let conformal = (i % 2 == 1).then(|| rng.uniform_range(0.05, 0.3));
        let p = QuadraticProblem::random(&mut rng, n, 0.0, conformal).unwrap();
        let init = HamiltonianState {
            phi: rng.normal_vec(n),
            p: rng.normal_vec(n),
        };
        let traj = integrate_hamilton_equations(&p, &init, 1.0, 1e-3).unwrap();
        let energy = |x: &[f64], q: &[f64]| {
            0.5 * dot(q, &gauss_solve(to_mat(&p.metric(x).unwrap()), q.to_vec()))
        };
        let h0 = energy(&init.phi, &init.p);
        let v = gauss_solve(to_mat(&p.metric(&init.phi).unwrap()), init.p.clone());
        for (s, st) in traj.s.iter().zip(&traj.states) {
            if conformal.is_none() {
                for ((x, x0), d) in st.phi.iter().zip(&init.phi).zip(&v) {
                    line = line.max((x - (x0 + s * d)).abs());
                }
            }
            drift = drift.max((energy(&st.phi, &st.p) - h0).abs());
        }
    }
    let ok = report(
        7,
        "geodesic limit",
        line <= 1e-8 && drift <= 1e-7,
        &format!("10 constant and 10 conformal metrics, line deviation {line:.3e} (tol 1e-8), energy drift {drift:.3e} (tol 1e-7)"),
        start.elapsed(),
        30.0,
    );
    assert!(ok);
}

#[test]
fn criterion_08_woodbury_complexity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let section = BenchSection {
        sizes: vec![250, 500, 1000, 2000, 4000],
        output_dim: 10,
        repeats: 5,
        dense_max: 2000,
    };
    let summary = bench::run_sweep(&section, 8).unwrap();
    // Least-squares slope of log time against log n.
    let pts: Vec<(f64, f64)> = summary
        .rows
        .iter()
        .map(|r| ((r.n_alpha as f64).ln(), r.woodbury_ms.ln()))
        .collect();
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let row = summary.rows.iter().find(|r| r.n_alpha == 2000).unwrap();
    let speedup = row.dense_ms.unwrap() / row.woodbury_ms;
    let ok = report(
        8,
        "woodbury cost scaling",
        slope <= 1.3 && speedup >= 10.0,
        &format!(
            "exponent {slope:.3} (max 1.3), speedup at n_alpha = 2000 {speedup:.1}x (min 10x)"
        ),
        start.elapsed(),
        600.0,
    );
    assert!(ok);
}

fn shipped(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn report_value(text: &str, key: &str) -> f64 {
    let prefix = format!("{key} = ");
    text.lines()
        .find_map(|l| l.strip_prefix(&prefix))
        .unwrap_or_else(|| panic!("{key} missing"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn criterion_09_stability_experiment() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = shipped("stability.toml");
    let res = Command::new(env!("CARGO_BIN_EXE_riemod"))
        .args([
            "stability",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ])
        .env("RIEMANN_LOG_LEVEL", "error")
        .output()
        .unwrap();
    let text = fs::read_to_string(out.join("stability_report.txt")).unwrap_or_default();
    let ok = res.status.success()
        && !text.is_empty()
        && {
            let n = report_value(&text, "n");
            let (kappa, lip, xi, mu) = (
                report_value(&text, "kappa"),
                report_value(&text, "lipschitz"),
                report_value(&text, "xi"),
                report_value(&text, "mu"),
            );
            let bound = 2.0 * kappa * kappa * lip / (xi * n.sqrt() * mu);
            let observed = report_value(&text, "observed_divergence");
            let halved = report_value(&text, "halved_step_observed_divergence");
            let change = (observed - halved).abs() / observed.abs().max(halved.abs());
            let individual = report_value(&text, "disturbance_worst_individual_ratio");
            let stacked = report_value(&text, "disturbance_worst_stacked_ratio");
            // mlp(tanh, 32, 8, 1): n·p = 32 outputs against 32·8 + 8 + 8 + 1 weights.
            let params = 32.0 * 8.0 + 8.0 + 8.0 + 1.0;
            let passed = n == 32.0
                && n <= params
                && xi > 0.0
                && (bound - report_value(&text, "bound")).abs() <= 1e-12 * bound
                && observed <= bound
                && individual <= 1.0
                && stacked <= 1.0
                && change < 0.01;
            report(
            9,
            "stability bound",
            passed,
            &format!(
                "n = {n}, xi = {xi:.3e}, bound {bound:.4e}, observed {observed:.4e}, margin {:.1}, disturbance ratios {individual:.3e}/{stacked:.3e}, halving change {change:.2e}",
                bound / observed
            ),
            start.elapsed(),
            600.0,
        )
        };
    if !ok && text.is_empty() {
        report(
            9,
            "stability bound",
            false,
            &String::from_utf8_lossy(&res.stderr),
            start.elapsed(),
            600.0,
        );
    }
    assert!(ok);
}

#[test]
fn criterion_10_degenerate_metric_identity() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = SplitMix64::new(1010);
    let mut mismatches = 0;
    for _ in 0..50 {
        let act = random_act(&mut rng);
        let net = Mlp::random(&mut rng, 8, act, usize::MAX).network();
        let params: ParameterState = net.init_params(&mut rng);
        let batch: Vec<Sample> = (0..1 + rng.below(8))
            .map(|_| {
                Sample::new(
                    rng.normal_vec(net.input_dim()),
                    rng.normal_vec(net.output_dim()),
                )
            })
            .collect();
        let cfg = OptimizerConfig {
            learning_rate: rng.uniform_range(0.01, 1.0),
            masses: vec![1.0],
            pullback: false,
            ..Default::default()
        };
        let (a, _) = riemannian_sgd_step(&net, &params, &batch, &cfg, 0).unwrap();
        let (b, _) =
            sgd_baseline_step(&net, &params, &batch, cfg.learning_rate, cfg.loss, 0).unwrap();
        mismatches += a
            .values()
            .iter()
            .zip(b.values())
            .filter(|(x, y)| x.to_bits() != y.to_bits())
            .count();
    }
    let ok = report(
        10,
        "degenerate metric identity",
        mismatches == 0,
        &format!("50 instances, {mismatches} values differ bitwise"),
        start.elapsed(),
        10.0,
    );
    assert!(ok);
}

#[test]
fn criterion_11_training_determinism() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = shipped("train_regression.toml");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let res = Command::new(env!("CARGO_BIN_EXE_riemod"))
            .args([
                "train",
                "--config",
                config.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .env("RIEMANN_LOG_LEVEL", "error")
            .output()
            .unwrap();
        assert!(res.status.success());
        fs::read(out.join("training.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let ok = report(
        11,
        "training determinism",
        a == b,
        &format!("two runs, {} bytes, identical = {}", a.len(), a == b),
        start.elapsed(),
        60.0,
    );
    assert!(ok);
}
