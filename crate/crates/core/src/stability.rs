//! Generalized NTK `H = (1/n) ∇ᵀȳ G⁻¹ ∇ȳ` and the leave-one-replaced
//! stability experiment under small-step Riemannian gradient flow.

use std::fmt::Write as _;

use crate::error::{check_dim, Error, Result};
use crate::graph::{Network, ParameterState, Tape};
use crate::linalg::{self, norm, DenseMatrix, DiagonalMatrix};
use crate::loss::LossKind;
use crate::metric::{build_output_metric, LayerMetric};
use crate::optimizer::{
    assemble_layer_metrics, evaluate_batch, metric_subset, OptimizerConfig, Sample,
};

/// Largest stacked output dimension `n·p` for which `H` is formed densely.
pub const MAX_STACKED_OUTPUTS: usize = 512;

/// `λ_min(H)` at or below this is treated as loss of full rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A dataset `S` and the dataset `S'` obtained by replacing sample `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDatasets {
    base: Vec<Sample>,
    index: usize,
    replacement: Sample,
}

impl PairedDatasets {
    pub fn new(base: Vec<Sample>, index: usize, replacement: Sample) -> Result<Self> {
        if index >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "replacement index {index} outside dataset of {} samples",
                base.len()
            )));
        }
        check_dim(
            "replacement input",
            base[index].input.len(),
            replacement.input.len(),
        )?;
        check_dim(
            "replacement target",
            base[index].target.len(),
            replacement.target.len(),
        )?;
        Ok(Self {
            base,
            index,
            replacement,
        })
    }

    /// `S' = S`: the replacement is the original sample.
    pub fn null(base: Vec<Sample>, index: usize) -> Result<Self> {
        let replacement = base.get(index).cloned().ok_or_else(|| {
            Error::InvalidArgument(format!("replacement index {index} out of range"))
        })?;
        Self::new(base, index, replacement)
    }

    pub fn base(&self) -> &[Sample] {
        &self.base
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn replacement(&self) -> &Sample {
        &self.replacement
    }

    pub fn replaced(&self) -> Vec<Sample> {
        let mut s = self.base.clone();
        s[self.index] = self.replacement.clone();
        s
    }

    pub fn n(&self) -> usize {
        self.base.len()
    }

    pub fn is_null(&self) -> bool {
        self.base[self.index] == self.replacement
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilityConstants {
    /// Largest `‖∇_θF(x)‖₂` seen along both runs.
    pub kappa: f64,
    /// Largest `‖∂ℓ/∂y‖` seen along both runs.
    pub lipschitz: f64,
    /// Smallest sampled `λ_min(H)`.
    pub xi: f64,
    pub mu: f64,
    pub n: usize,
}

impl StabilityConstants {
    /// `2κ²L / (ξ √n μ)`.
    pub fn bound(&self) -> f64 {
        2.0 * self.kappa * self.kappa * self.lipschitz
            / (self.xi * (self.n as f64).sqrt() * self.mu)
    }

    /// `2κ²L / (n μ)`.
    pub fn individual_disturbance_bound(&self) -> f64 {
        2.0 * self.kappa * self.kappa * self.lipschitz / (self.n as f64 * self.mu)
    }

    /// `2κ²L / (√n μ)`.
    pub fn stacked_disturbance_bound(&self) -> f64 {
        2.0 * self.kappa * self.kappa * self.lipschitz / ((self.n as f64).sqrt() * self.mu)
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityConfig {
    /// Metric settings; the loss is always mean squared error.
    pub metric: OptimizerConfig,
    /// `η = step_factor · μ / κ₀²` unless `learning_rate` is set.
    pub step_factor: f64,
    pub learning_rate: Option<f64>,
    pub ntk_interval: usize,
    /// Divergence is observed for `t ≥ transient_factor / ξ̂`.
    pub transient_factor: f64,
    /// Runs stop once `t ≥ horizon_factor / ξ̂`.
    pub horizon_factor: f64,
    pub max_steps: usize,
    /// Steps per synchronisation of the two runs.
    pub chunk_steps: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            metric: OptimizerConfig {
                loss: LossKind::MeanSquaredError,
                ..Default::default()
            },
            step_factor: 1e-3,
            learning_rate: None,
            ntk_interval: 10,
            transient_factor: 5.0,
            horizon_factor: 6.0,
            max_steps: 5_000_000,
            chunk_steps: 1000,
        }
    }
}

impl StabilityConfig {
    fn validate(&self, network: &Network) -> Result<()> {
        self.metric.validate(network.layer_count())?;
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidArgument(
                    "learning rate must be positive".into(),
                ));
            }
        }
        if !(self.step_factor > 0.0) || self.ntk_interval == 0 || self.chunk_steps == 0 {
            return Err(Error::InvalidArgument(
                "step_factor, ntk_interval and chunk_steps must be positive".into(),
            ));
        }
        if !(self.transient_factor > 0.0 && self.horizon_factor > self.transient_factor) {
            return Err(Error::InvalidArgument(
                "need 0 < transient_factor < horizon_factor".into(),
            ));
        }
        Ok(())
    }

    fn mse_metric(&self) -> OptimizerConfig {
        OptimizerConfig {
            loss: LossKind::MeanSquaredError,
            ..self.metric.clone()
        }
    }
}

/// Per-step record of the paired runs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub t: f64,
    /// `max_i |y_i − y'_i|` on the inputs of `S`.
    pub divergence: f64,
    /// `max_i |d_i|`.
    pub disturbance_max: f64,
    /// `‖d̄‖₂`.
    pub disturbance_stacked: f64,
    pub loss: f64,
    pub loss_replaced: f64,
}

/// Everything recorded along the two runs; constants are estimated from it
/// after the fact.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub learning_rate: f64,
    pub trace: Vec<StepTrace>,
    /// Per step, the largest Jacobian norm over both runs.
    pub kappa: Vec<f64>,
    /// Per step, the largest loss-gradient norm over both runs.
    pub lipschitz: Vec<f64>,
    /// `(step, λ_min(H), λ_min(H'))` every `ntk_interval` steps.
    pub ntk_min: Vec<(usize, f64, f64)>,
    pub mu: f64,
    pub n: usize,
}

impl RunArtifacts {
    pub fn xi(&self) -> f64 {
        self.ntk_min
            .iter()
            .fold(f64::INFINITY, |m, &(_, a, b)| m.min(a).min(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisturbanceCheck {
    pub passed: bool,
    pub individual_bound: f64,
    pub stacked_bound: f64,
    /// Largest recorded `|d_i| / bound`.
    pub worst_individual_ratio: f64,
    /// Largest recorded `‖d̄‖ / bound`.
    pub worst_stacked_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilityReport {
    pub constants: StabilityConstants,
    pub bound: f64,
    /// `sup |y_i − y'_i|` over `t ≥ transient_horizon`.
    pub observed_divergence: f64,
    pub transient_horizon: f64,
    pub final_time: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// `η κ̂² / μ`; the small-step regime asks for at most `step_factor`.
    pub step_ratio: f64,
    pub disturbance: DisturbanceCheck,
    pub artifacts: RunArtifacts,
}

impl StabilityReport {
    pub fn bound_holds(&self) -> bool {
        self.observed_divergence <= self.bound
    }

    /// `bound / observed`; infinite for zero divergence.
    pub fn margin(&self) -> f64 {
        if self.observed_divergence == 0.0 {
            f64::INFINITY
        } else {
            self.bound / self.observed_divergence
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.constants;
        let mut out = String::new();
        let _ = writeln!(out, "n = {}", c.n);
        let _ = writeln!(out, "kappa = {:.16e}", c.kappa);
        let _ = writeln!(out, "lipschitz = {:.16e}", c.lipschitz);
        let _ = writeln!(out, "xi = {:.16e}", c.xi);
        let _ = writeln!(out, "mu = {:.16e}", c.mu);
        let _ = writeln!(out, "learning_rate = {:.16e}", self.learning_rate);
        let _ = writeln!(out, "step_ratio = {:.16e}", self.step_ratio);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "final_time = {:.16e}", self.final_time);
        let _ = writeln!(out, "transient_horizon = {:.16e}", self.transient_horizon);
        let _ = writeln!(out, "bound = {:.16e}", self.bound);
        let _ = writeln!(
            out,
            "observed_divergence = {:.16e}",
            self.observed_divergence
        );
        let _ = writeln!(out, "margin = {:.16e}", self.margin());
        let _ = writeln!(out, "bound_holds = {}", self.bound_holds());
        let d = &self.disturbance;
        let _ = writeln!(
            out,
            "disturbance_individual_bound = {:.16e}",
            d.individual_bound
        );
        let _ = writeln!(out, "disturbance_stacked_bound = {:.16e}", d.stacked_bound);
        let _ = writeln!(
            out,
            "disturbance_worst_individual_ratio = {:.16e}",
            d.worst_individual_ratio
        );
        let _ = writeln!(
            out,
            "disturbance_worst_stacked_ratio = {:.16e}",
            d.worst_stacked_ratio
        );
        let _ = writeln!(out, "disturbance_bounds_hold = {}", d.passed);
        out
    }

    /// `step, t, divergence, disturbance_max, disturbance_stacked, loss, loss_replaced`
    /// for every `every`-th step and the last one.
    pub fn divergence_csv(&self, every: usize) -> String {
        let mut out = String::from(
            "step,t,divergence,disturbance_max,disturbance_stacked,loss,loss_replaced\n",
        );
        let trace = &self.artifacts.trace;
        for (i, r) in trace.iter().enumerate() {
            if i % every.max(1) == 0 || i + 1 == trace.len() {
                let _ = writeln!(
                    out,
                    "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    r.step,
                    r.t,
                    r.divergence,
                    r.disturbance_max,
                    r.disturbance_stacked,
                    r.loss,
                    r.loss_replaced
                );
            }
        }
        out
    }
}

/// `∇_θF(x)` as a `p × m` matrix, columns in flat parameter order.
pub fn parameter_jacobian(network: &Network, tape: &Tape) -> Result<DenseMatrix> {
    let blocks = network.output_jacobians(tape)?;
    let p = network.output_dim();
    let m = network.param_count();
    let mut out = DenseMatrix::zeros(p, m);
    for r in 0..p {
        let row = out.row_mut(r);
        let mut off = 0;
        for b in &blocks {
            let n = b.matrix.cols();
            row[off..off + n].copy_from_slice(b.matrix.row(r));
            off += n;
        }
    }
    Ok(out)
}

/// Block-diagonal `G⁻¹ v` over the flat parameter vector.
fn apply_metric_inverse(metrics: &[LayerMetric], v: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(v.len());
    let mut off = 0;
    for m in metrics {
        let n = m.dim();
        out.extend(m.apply_inverse(&v[off..off + n])?);
        off += n;
    }
    check_dim("metric inverse argument", off, v.len())?;
    Ok(out)
}

fn ntk_from_parts(jacobians: &[DenseMatrix], metrics: &[LayerMetric]) -> Result<DenseMatrix> {
    let n = jacobians.len();
    let p = jacobians.first().map_or(0, DenseMatrix::rows);
    let np = n * p;
    if np > MAX_STACKED_OUTPUTS {
        return Err(Error::InvalidArgument(format!(
            "stacked output dimension {np} exceeds {MAX_STACKED_OUTPUTS}"
        )));
    }
    let mut w = Vec::with_capacity(np);
    for j in jacobians {
        for b in 0..p {
            w.push(apply_metric_inverse(metrics, j.row(b))?);
        }
    }
    let rows: Vec<&[f64]> = jacobians
        .iter()
        .flat_map(|j| (0..p).map(move |a| j.row(a)))
        .collect();
    let mut h = DenseMatrix::zeros(np, np);
    for (r, row) in rows.iter().enumerate() {
        for (c, col) in w.iter().enumerate().skip(r) {
            let v = linalg::dot(row, col) / n as f64;
            h[(r, c)] = v;
            h[(c, r)] = v;
        }
    }
    Ok(h)
}

/// Generalized NTK of `batch` at `params` with the layerwise metric of
/// `config` built on the same batch.
pub fn ntk_matrix(
    network: &Network,
    params: &ParameterState,
    batch: &[Sample],
    config: &OptimizerConfig,
) -> Result<DenseMatrix> {
    let np = batch.len() * network.output_dim();
    if np > MAX_STACKED_OUTPUTS {
        return Err(Error::InvalidArgument(format!(
            "stacked output dimension {np} exceeds {MAX_STACKED_OUTPUTS}"
        )));
    }
    let eval = evaluate_batch(network, params, batch, config.loss)?;
    let metrics = assemble_layer_metrics(network, &eval, config)?;
    let jac: Vec<DenseMatrix> = eval
        .tapes
        .iter()
        .map(|t| parameter_jacobian(network, t))
        .collect::<Result<_>>()?;
    ntk_from_parts(&jac, &metrics)
}

/// `d_i = (1/n) ∇F(x_i)ᵀ G'⁻¹ [∇ℓ(x'_k, ŷ'_k) − ∇ℓ(x_k, ŷ_k)]` at `θ'`, for
/// every input `x_i` of `S`. `G'` is the metric of the `S'` run.
pub fn disturbances(
    network: &Network,
    params: &ParameterState,
    paired: &PairedDatasets,
    config: &OptimizerConfig,
) -> Result<Vec<Vec<f64>>> {
    let replaced = paired.replaced();
    let eval = evaluate_batch(network, params, &replaced, LossKind::MeanSquaredError)?;
    let metrics = assemble_layer_metrics(network, &eval, config)?;
    let jac: Vec<DenseMatrix> = eval
        .tapes
        .iter()
        .map(|t| parameter_jacobian(network, t))
        .collect::<Result<_>>()?;
    let original = &paired.base()[paired.index()];
    let (y_k, tape_k) = network.forward(params, &original.input)?;
    let j_k = parameter_jacobian(network, &tape_k)?;
    let k = paired.index();
    let r_k: Vec<f64> = y_k
        .iter()
        .zip(&original.target)
        .map(|(a, b)| a - b)
        .collect();
    let delta = replacement_gradient_gap(&jac[k], &eval.output_gradients[k], &j_k, &r_k)?;
    let w = apply_metric_inverse(&metrics, &delta)?;
    let n = paired.n() as f64;
    (0..paired.n())
        .map(|i| {
            let j = if i == k { &j_k } else { &jac[i] };
            Ok(j.matvec(&w)?.into_iter().map(|v| v / n).collect())
        })
        .collect()
}

/// `J'_kᵀ r'_k − J_kᵀ r_k`.
fn replacement_gradient_gap(
    j_new: &DenseMatrix,
    r_new: &[f64],
    j_old: &DenseMatrix,
    r_old: &[f64],
) -> Result<Vec<f64>> {
    let mut g = j_new.tr_matvec(r_new)?;
    for (gi, o) in g.iter_mut().zip(j_old.tr_matvec(r_old)?) {
        *gi -= o;
    }
    Ok(g)
}

/// Same metrics as [`assemble_layer_metrics`], with `K` rows formed as
/// `L_o(y_i) J_i / √B` from Jacobians already at hand.
fn metrics_from_jacobians(
    network: &Network,
    jac: &[DenseMatrix],
    outputs: &[Vec<f64>],
    config: &OptimizerConfig,
) -> Result<Vec<LayerMetric>> {
    let sizes = network.layer_sizes();
    let mut metrics = Vec::with_capacity(sizes.len());
    let subset = metric_subset(jac.len(), config.metric_batch_cap);
    let scaled: Vec<DenseMatrix> = if config.pullback {
        let scale = 1.0 / (subset.len() as f64).sqrt();
        subset
            .iter()
            .map(|&i| {
                let l_o = build_output_metric(&config.output_metric, &outputs[i], config.epsilon)?;
                if l_o.is_identity() {
                    Ok(jac[i].scaled(scale))
                } else {
                    l_o.factor.as_matrix().scaled(scale).matmul(&jac[i])
                }
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut off = 0;
    for (a, &n) in sizes.iter().enumerate() {
        let mass = DiagonalMatrix::scalar(config.mass(a), n)?;
        if config.pullback {
            let rows: Vec<DenseMatrix> = scaled.iter().map(|k| column_block(k, off, n)).collect();
            metrics.push(LayerMetric::new(a, mass, DenseMatrix::vstack(&rows)?)?);
        } else {
            metrics.push(LayerMetric::mass_only(a, mass));
        }
        off += n;
    }
    Ok(metrics)
}

fn column_block(m: &DenseMatrix, start: usize, len: usize) -> DenseMatrix {
    let mut data = Vec::with_capacity(m.rows() * len);
    for r in 0..m.rows() {
        data.extend_from_slice(&m.row(r)[start..start + len]);
    }
    DenseMatrix::new(m.rows(), len, data).expect("block shape")
}

/// `‖J‖₂`, without forming a Gram matrix for a single output.
fn jacobian_norm(j: &DenseMatrix) -> Result<f64> {
    if j.rows() == 1 {
        Ok(norm(j.row(0)))
    } else {
        linalg::spectral_norm(j)
    }
}

/// Per-step quantities from one run.
struct RunStep {
    outputs: Vec<Vec<f64>>,
    kappa: f64,
    lipschitz: f64,
    ntk_min: Option<f64>,
    loss: f64,
    disturbance: Option<(f64, f64)>,
}

struct Run<'a> {
    network: &'a Network,
    params: ParameterState,
    batch: Vec<Sample>,
    /// For the `S'` run: the replaced original sample and its index.
    original: Option<(usize, &'a Sample)>,
    config: OptimizerConfig,
    learning_rate: f64,
    ntk_interval: usize,
}

impl Run<'_> {
    fn step(&mut self, step: usize) -> Result<RunStep> {
        let net = self.network;
        let eval = evaluate_batch(net, &self.params, &self.batch, LossKind::MeanSquaredError)?;
        let jac: Vec<DenseMatrix> = eval
            .tapes
            .iter()
            .map(|t| parameter_jacobian(net, t))
            .collect::<Result<_>>()?;
        let metrics = metrics_from_jacobians(net, &jac, &eval.outputs, &self.config)?;
        let mut kappa = 0.0f64;
        for j in &jac {
            kappa = kappa.max(jacobian_norm(j)?);
        }
        let mut lipschitz = eval
            .output_gradients
            .iter()
            .fold(0.0f64, |m, g| m.max(norm(g)));
        let ntk_min = if step % self.ntk_interval == 0 {
            Some(linalg::min_eigenvalue(&ntk_from_parts(&jac, &metrics)?)?)
        } else {
            None
        };
        let mut outputs = eval.outputs.clone();
        let mut disturbance = None;
        if let Some((k, original)) = self.original {
            let (y_k, tape_k) = net.forward(&self.params, &original.input)?;
            let j_k = parameter_jacobian(net, &tape_k)?;
            let r_k: Vec<f64> = y_k
                .iter()
                .zip(&original.target)
                .map(|(a, b)| a - b)
                .collect();
            kappa = kappa.max(jacobian_norm(&j_k)?);
            lipschitz = lipschitz.max(norm(&r_k));
            let delta = replacement_gradient_gap(&jac[k], &eval.output_gradients[k], &j_k, &r_k)?;
            let w = apply_metric_inverse(&metrics, &delta)?;
            let n = self.batch.len() as f64;
            let (mut worst, mut sq) = (0.0f64, 0.0);
            for (i, j) in jac.iter().enumerate() {
                let j = if i == k { &j_k } else { j };
                let d = norm(&j.matvec(&w)?) / n;
                worst = worst.max(d);
                sq += d * d;
            }
            disturbance = Some((worst, sq.sqrt()));
            outputs[k] = y_k;
        }
        let mut grad = vec![0.0; net.param_count()];
        for (j, dl) in jac.iter().zip(&eval.output_gradients) {
            linalg::axpy(1.0 / self.batch.len() as f64, &j.tr_matvec(dl)?, &mut grad);
        }
        for m in &metrics {
            let range = self.params.block_range(m.layer);
            let dir = m.apply_inverse(&grad[range])?;
            for (w, d) in self.params.block_mut(m.layer).iter_mut().zip(dir) {
                *w += -self.learning_rate * d;
            }
        }
        crate::error::check_finite("stability iterate", self.params.values())?;
        Ok(RunStep {
            outputs,
            kappa,
            lipschitz,
            ntk_min,
            loss: eval.loss,
            disturbance,
        })
    }

    fn chunk(&mut self, start: usize, len: usize) -> Result<Vec<RunStep>> {
        (start..start + len).map(|s| self.step(s)).collect()
    }
}

fn initial_kappa(
    network: &Network,
    params: &ParameterState,
    paired: &PairedDatasets,
) -> Result<f64> {
    let mut kappa = 0.0f64;
    for s in paired
        .base()
        .iter()
        .chain(std::iter::once(paired.replacement()))
    {
        let (_, tape) = network.forward(params, &s.input)?;
        kappa = kappa.max(jacobian_norm(&parameter_jacobian(network, &tape)?)?);
    }
    Ok(kappa)
}

/// Trains on `S` and `S'` from the same initialization with explicit Euler
/// steps of the Riemannian gradient flow, the two runs on separate threads,
/// until `t ≥ horizon_factor / ξ̂`.
pub fn paired_training(
    network: &Network,
    init: &ParameterState,
    paired: &PairedDatasets,
    config: &StabilityConfig,
) -> Result<StabilityReport> {
    config.validate(network)?;
    let n = paired.n();
    let p = network.output_dim();
    if n * p > MAX_STACKED_OUTPUTS {
        return Err(Error::InvalidArgument(format!(
            "stacked output dimension {} exceeds {MAX_STACKED_OUTPUTS}",
            n * p
        )));
    }
    if n * p > network.param_count() {
        return Err(Error::RankDeficient { lambda_min: 0.0 });
    }
    let metric = config.mse_metric();
    let mu = metric.min_mass();
    let learning_rate = match config.learning_rate {
        Some(lr) => lr,
        None => {
            let k0 = initial_kappa(network, init, paired)?;
            config.step_factor * mu / (k0 * k0).max(f64::MIN_POSITIVE)
        }
    };
    let k = paired.index();
    let mut run_s = Run {
        network,
        params: init.clone(),
        batch: paired.base().to_vec(),
        original: None,
        config: metric.clone(),
        learning_rate,
        ntk_interval: config.ntk_interval,
    };
    let mut run_r = Run {
        network,
        params: init.clone(),
        batch: paired.replaced(),
        original: Some((k, &paired.base()[k])),
        config: metric.clone(),
        learning_rate,
        ntk_interval: config.ntk_interval,
    };
    let mut artifacts = RunArtifacts {
        learning_rate,
        trace: Vec::new(),
        kappa: Vec::new(),
        lipschitz: Vec::new(),
        ntk_min: Vec::new(),
        mu,
        n,
    };
    let mut steps = 0usize;
    loop {
        let len = config.chunk_steps.min(config.max_steps - steps);
        let (a, b) = std::thread::scope(|scope| {
            let ha = scope.spawn(|| run_s.chunk(steps, len));
            let hb = scope.spawn(|| run_r.chunk(steps, len));
            (ha.join(), hb.join())
        });
        let a = a.map_err(|_| Error::InvalidArgument("stability run panicked".into()))??;
        let b = b.map_err(|_| Error::InvalidArgument("stability run panicked".into()))??;
        for (i, (sa, sb)) in a.into_iter().zip(b).enumerate() {
            let step = steps + i;
            let divergence = sa
                .outputs
                .iter()
                .zip(&sb.outputs)
                .map(|(y, yr)| norm(&y.iter().zip(yr).map(|(u, v)| u - v).collect::<Vec<_>>()))
                .fold(0.0f64, f64::max);
            let (disturbance_max, disturbance_stacked) = sb.disturbance.unwrap_or((0.0, 0.0));
            artifacts.trace.push(StepTrace {
                step,
                t: step as f64 * learning_rate,
                divergence,
                disturbance_max,
                disturbance_stacked,
                loss: sa.loss,
                loss_replaced: sb.loss,
            });
            artifacts.kappa.push(sa.kappa.max(sb.kappa));
            artifacts.lipschitz.push(sa.lipschitz.max(sb.lipschitz));
            if let (Some(x), Some(y)) = (sa.ntk_min, sb.ntk_min) {
                if x.min(y) <= RANK_TOLERANCE {
                    return Err(Error::RankDeficient {
                        lambda_min: x.min(y),
                    });
                }
                artifacts.ntk_min.push((step, x, y));
            }
        }
        steps += len;
        let xi = artifacts.xi();
        log::debug!(
            "paired training: {steps} steps, t = {:.4e}, xi = {xi:.4e}, horizon = {:.4e}",
            steps as f64 * learning_rate,
            config.horizon_factor / xi
        );
        if steps as f64 * learning_rate >= config.horizon_factor / xi {
            break;
        }
        if steps >= config.max_steps {
            return Err(Error::InvalidArgument(format!(
                "horizon {:.3e} not reached within {} steps",
                config.horizon_factor / xi,
                config.max_steps
            )));
        }
    }
    let constants = estimate_constants(&artifacts)?;
    let transient_horizon = config.transient_factor / constants.xi;
    let observed_divergence = artifacts
        .trace
        .iter()
        .filter(|r| r.t >= transient_horizon)
        .fold(0.0f64, |m, r| m.max(r.divergence));
    let disturbance = disturbance_bound_check(&artifacts, &constants);
    Ok(StabilityReport {
        bound: constants.bound(),
        observed_divergence,
        transient_horizon,
        final_time: artifacts.trace.last().map_or(0.0, |r| r.t),
        steps,
        learning_rate,
        step_ratio: learning_rate * constants.kappa * constants.kappa / mu,
        disturbance,
        constants,
        artifacts,
    })
}

/// `κ̂`, `L̂` as maxima and `ξ̂` as the minimum over everything recorded.
pub fn estimate_constants(artifacts: &RunArtifacts) -> Result<StabilityConstants> {
    let xi = artifacts.xi();
    if !(xi > RANK_TOLERANCE) {
        return Err(Error::RankDeficient {
            lambda_min: if xi.is_finite() { xi } else { 0.0 },
        });
    }
    let kappa = artifacts.kappa.iter().fold(0.0f64, |m, &v| m.max(v));
    let lipschitz = artifacts.lipschitz.iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(StabilityConstants {
        kappa,
        lipschitz,
        xi,
        mu: artifacts.mu,
        n: artifacts.n,
    })
}

/// Checks every recorded disturbance against `2κ²L/(nμ)` and `2κ²L/(√nμ)`.
pub fn disturbance_bound_check(
    artifacts: &RunArtifacts,
    constants: &StabilityConstants,
) -> DisturbanceCheck {
    let individual_bound = constants.individual_disturbance_bound();
    let stacked_bound = constants.stacked_disturbance_bound();
    let ratio = |v: f64, b: f64| if v == 0.0 { 0.0 } else { v / b };
    let worst_individual_ratio = artifacts.trace.iter().fold(0.0f64, |m, r| {
        m.max(ratio(r.disturbance_max, individual_bound))
    });
    let worst_stacked_ratio = artifacts.trace.iter().fold(0.0f64, |m, r| {
        m.max(ratio(r.disturbance_stacked, stacked_bound))
    });
    DisturbanceCheck {
        passed: worst_individual_ratio <= 1.0 && worst_stacked_ratio <= 1.0,
        individual_bound,
        stacked_bound,
        worst_individual_ratio,
        worst_stacked_ratio,
    }
}
