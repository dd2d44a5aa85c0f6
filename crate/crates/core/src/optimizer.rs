//! Riemannian SGD with layerwise metrics, and a plain SGD baseline.

use std::time::{Duration, Instant};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::graph::{Network, ParameterState, Tape};
use crate::linalg::{norm, DenseMatrix, DiagonalMatrix};
use crate::loss::{evaluate_loss, LossKind};
use crate::metric::{build_output_metric, LayerMetric, OutputMetricKind};
use crate::rng::SplitMix64;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

impl Sample {
    pub fn new(input: Vec<f64>, target: Vec<f64>) -> Self {
        Self { input, target }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOrder {
    /// All layers use Jacobians at the pre-step parameters and move together.
    Simultaneous,
    /// Layers `L, L−1, …, 1` in turn, each seeing the already-updated later layers.
    Sequential,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// `μ_α` per layer; a single entry applies to every layer.
    pub masses: Vec<f64>,
    pub output_metric: OutputMetricKind,
    pub epsilon: f64,
    /// Maximum samples entering the stacked metric; `None` uses the whole batch.
    pub metric_batch_cap: Option<usize>,
    pub max_steps: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// When false, `K = 0` and the update is pure mass-matrix preconditioning.
    pub pullback: bool,
    pub update_order: UpdateOrder,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            masses: vec![1.0],
            output_metric: OutputMetricKind::Identity,
            epsilon: 1e-6,
            metric_batch_cap: None,
            max_steps: 100,
            seed: 0,
            loss: LossKind::MeanSquaredError,
            pullback: true,
            update_order: UpdateOrder::Simultaneous,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if self.masses.is_empty() || self.masses.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::InvalidArgument("masses must be positive".into()));
        }
        if self.masses.len() != 1 && self.masses.len() != layer_count {
            return Err(Error::DimensionMismatch {
                context: "per-layer masses",
                expected: layer_count,
                actual: self.masses.len(),
            });
        }
        if self.output_metric != OutputMetricKind::Identity && !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if self.metric_batch_cap == Some(0) {
            return Err(Error::InvalidArgument(
                "metric_batch_cap must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn mass(&self, layer: usize) -> f64 {
        if self.masses.len() == 1 {
            self.masses[0]
        } else {
            self.masses[layer]
        }
    }

    pub fn min_mass(&self) -> f64 {
        self.masses.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingRecord {
    pub step: usize,
    /// Batch loss at the pre-step parameters.
    pub loss: f64,
    pub update_norms: Vec<f64>,
    pub duration: Duration,
}

/// Forward pass over a batch: per-sample tapes, loss gradients and the mean loss.
pub struct BatchEvaluation {
    pub outputs: Vec<Vec<f64>>,
    pub tapes: Vec<Tape>,
    pub output_gradients: Vec<Vec<f64>>,
    pub loss: f64,
}

pub fn evaluate_batch(
    network: &Network,
    params: &ParameterState,
    batch: &[Sample],
    loss: LossKind,
) -> Result<BatchEvaluation> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut eval = BatchEvaluation {
        outputs: Vec::with_capacity(batch.len()),
        tapes: Vec::with_capacity(batch.len()),
        output_gradients: Vec::with_capacity(batch.len()),
        loss: 0.0,
    };
    for s in batch {
        let (y, tape) = network.forward(params, &s.input)?;
        let (value, grad) = evaluate_loss(loss, &y, &s.target)?;
        eval.loss += value;
        eval.outputs.push(y);
        eval.tapes.push(tape);
        eval.output_gradients.push(grad);
    }
    eval.loss /= batch.len() as f64;
    Ok(eval)
}

pub fn batch_loss(
    network: &Network,
    params: &ParameterState,
    batch: &[Sample],
    loss: LossKind,
) -> Result<f64> {
    Ok(evaluate_batch(network, params, batch, loss)?.loss)
}

/// Mean parameter gradient by backpropagation, flat block layout.
pub fn batch_gradient(network: &Network, eval: &BatchEvaluation) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; network.param_count()];
    let scale = 1.0 / eval.tapes.len() as f64;
    for (tape, dl) in eval.tapes.iter().zip(&eval.output_gradients) {
        let g = network.backward_adjoints(tape, dl)?.gradient;
        crate::linalg::axpy(scale, &g, &mut grad);
    }
    check_finite("batch gradient", &grad)?;
    Ok(grad)
}

/// Indices of the samples entering the metric: all of them, or `cap` evenly spaced.
pub fn metric_subset(batch_len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < batch_len => (0..c).map(|i| i * batch_len / c).collect(),
        _ => (0..batch_len).collect(),
    }
}

/// Assembles `(D^(α), K^(α))` for every layer. Per-sample scaled Jacobians
/// `L_o(y_i) J_i` are stacked and divided by `√B`, so `KᵀK` is the batch-mean
/// pullback metric.
pub fn assemble_layer_metrics(
    network: &Network,
    eval: &BatchEvaluation,
    config: &OptimizerConfig,
) -> Result<Vec<LayerMetric>> {
    let sizes = network.layer_sizes();
    let masses: Vec<DiagonalMatrix> = sizes
        .iter()
        .enumerate()
        .map(|(a, &n)| DiagonalMatrix::scalar(config.mass(a), n))
        .collect::<Result<_>>()?;
    if !config.pullback {
        return Ok(masses
            .into_iter()
            .enumerate()
            .map(|(a, d)| LayerMetric::mass_only(a, d))
            .collect());
    }
    let subset = metric_subset(eval.tapes.len(), config.metric_batch_cap);
    let scale = 1.0 / (subset.len() as f64).sqrt();
    let mut per_layer: Vec<Vec<DenseMatrix>> = vec![Vec::with_capacity(subset.len()); sizes.len()];
    for &i in &subset {
        let out_metric =
            build_output_metric(&config.output_metric, &eval.outputs[i], config.epsilon)?;
        let l_o = out_metric.factor.as_matrix().scaled(scale);
        for (a, k) in network
            .scaled_jacobians(&eval.tapes[i], &l_o)?
            .into_iter()
            .enumerate()
        {
            per_layer[a].push(k);
        }
    }
    masses
        .into_iter()
        .zip(per_layer)
        .enumerate()
        .map(|(a, (d, ks))| LayerMetric::new(a, d, DenseMatrix::vstack(&ks)?))
        .collect()
}

/// Per-layer `Δw^(α) = −η(A − D⁻¹Kᵀ S⁻¹ K A)` with `A = D⁻¹g`.
fn layer_update(metric: &LayerMetric, gradient: &[f64], eta: f64) -> Result<Vec<f64>> {
    let direction = metric.apply_inverse(gradient)?;
    Ok(direction.into_iter().map(|d| -eta * d).collect())
}

fn apply_update(params: &mut ParameterState, layer: usize, delta: &[f64]) {
    for (w, d) in params.block_mut(layer).iter_mut().zip(delta) {
        *w += d;
    }
}

/// One step of Riemannian SGD with layerwise metrics.
pub fn riemannian_sgd_step(
    network: &Network,
    params: &ParameterState,
    batch: &[Sample],
    config: &OptimizerConfig,
    step: usize,
) -> Result<(ParameterState, TrainingRecord)> {
    config.validate(network.layer_count())?;
    let start = Instant::now();
    let mut next = params.clone();
    let mut update_norms = vec![0.0; network.layer_count()];
    let mut loss = f64::NAN;
    match config.update_order {
        UpdateOrder::Simultaneous => {
            let eval = evaluate_batch(network, params, batch, config.loss)?;
            loss = eval.loss;
            let grad = batch_gradient(network, &eval)?;
            let metrics = assemble_layer_metrics(network, &eval, config)?;
            for metric in &metrics {
                let a = metric.layer;
                let delta =
                    layer_update(metric, &grad[params.block_range(a)], config.learning_rate)?;
                update_norms[a] = norm(&delta);
                apply_update(&mut next, a, &delta);
            }
        }
        UpdateOrder::Sequential => {
            for a in (0..network.layer_count()).rev() {
                let eval = evaluate_batch(network, &next, batch, config.loss)?;
                if a + 1 == network.layer_count() {
                    loss = eval.loss;
                }
                let grad = batch_gradient(network, &eval)?;
                let metric = assemble_layer_metrics(network, &eval, config)?.swap_remove(a);
                let delta =
                    layer_update(&metric, &grad[next.block_range(a)], config.learning_rate)?;
                update_norms[a] = norm(&delta);
                apply_update(&mut next, a, &delta);
            }
            if network.layer_count() == 0 {
                loss = batch_loss(network, params, batch, config.loss)?;
            }
        }
    }
    check_finite("updated parameters", next.values())?;
    Ok((
        next,
        TrainingRecord {
            step,
            loss,
            update_norms,
            duration: start.elapsed(),
        },
    ))
}

/// Plain gradient step `Δw = −η∇ℓ`.
pub fn sgd_baseline_step(
    network: &Network,
    params: &ParameterState,
    batch: &[Sample],
    learning_rate: f64,
    loss: LossKind,
    step: usize,
) -> Result<(ParameterState, TrainingRecord)> {
    let start = Instant::now();
    let eval = evaluate_batch(network, params, batch, loss)?;
    let grad = batch_gradient(network, &eval)?;
    let mut next = params.clone();
    let mut update_norms = Vec::with_capacity(network.layer_count());
    for a in 0..network.layer_count() {
        let delta: Vec<f64> = grad[params.block_range(a)]
            .iter()
            .map(|g| -learning_rate * g)
            .collect();
        update_norms.push(norm(&delta));
        apply_update(&mut next, a, &delta);
    }
    check_finite("updated parameters", next.values())?;
    Ok((
        next,
        TrainingRecord {
            step,
            loss: eval.loss,
            update_norms,
            duration: start.elapsed(),
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Riemannian,
    Sgd,
}

/// Result of a training run. On a numerical failure `error` is set and
/// `records`/`params` hold the last valid state.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterState,
    pub records: Vec<TrainingRecord>,
    pub error: Option<Error>,
}

/// Runs `config.max_steps` steps over minibatches drawn from a seeded
/// reshuffle of `data` each epoch. `batch_size = None` is full batch.
pub fn train(
    network: &Network,
    init: ParameterState,
    data: &[Sample],
    config: &OptimizerConfig,
    method: Method,
    batch_size: Option<usize>,
) -> Result<TrainOutcome> {
    config.validate(network.layer_count())?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let bs = batch_size.unwrap_or(data.len()).clamp(1, data.len());
    let mut rng = SplitMix64::new(config.seed ^ 0x5EED_BA7C_0000_0001);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut params = init;
    let mut records = Vec::with_capacity(config.max_steps);
    let mut batch = Vec::with_capacity(bs);
    for step in 0..config.max_steps {
        batch.clear();
        if bs == data.len() {
            batch.extend_from_slice(data);
        } else {
            while batch.len() < bs {
                if cursor >= order.len() {
                    rng.shuffle(&mut order);
                    cursor = 0;
                }
                batch.push(data[order[cursor]].clone());
                cursor += 1;
            }
        }
        let result = match method {
            Method::Riemannian => riemannian_sgd_step(network, &params, &batch, config, step),
            Method::Sgd => sgd_baseline_step(
                network,
                &params,
                &batch,
                config.learning_rate,
                config.loss,
                step,
            ),
        };
        match result {
            Ok((next, record)) => {
                log::debug!("step {step}: loss {:.6e}", record.loss);
                params = next;
                records.push(record);
            }
            Err(e) => {
                log::error!("step {step} failed: {e}");
                return Ok(TrainOutcome {
                    params,
                    records,
                    error: Some(e),
                });
            }
        }
    }
    Ok(TrainOutcome {
        params,
        records,
        error: None,
    })
}

/// Dense oracle for one simultaneous step: materializes each `G^(α)` and
/// solves it with a full Cholesky factorization.
pub fn dense_reference_step(
    network: &Network,
    params: &ParameterState,
    batch: &[Sample],
    config: &OptimizerConfig,
) -> Result<ParameterState> {
    let eval = evaluate_batch(network, params, batch, config.loss)?;
    let grad = batch_gradient(network, &eval)?;
    let metrics = assemble_layer_metrics(network, &eval, config)?;
    let mut next = params.clone();
    for metric in &metrics {
        let a = metric.layer;
        let g = &grad[params.block_range(a)];
        check_dim("dense step", metric.dim(), g.len())?;
        let x = metric.dense_apply_inverse(g)?;
        let delta: Vec<f64> = x.iter().map(|v| -config.learning_rate * v).collect();
        apply_update(&mut next, a, &delta);
    }
    Ok(next)
}
