use crate::error::{check_dim, Error, Result};
use crate::graph::Network;
use crate::linalg::{self, solve_spd, DenseMatrix};
use crate::loss::LossKind;
use crate::optimizer::{
    assemble_layer_metrics, batch_gradient, evaluate_batch, OptimizerConfig, Sample,
};
use crate::rng::SplitMix64;

/// Step for finite-difference fallbacks on metric and Hessian derivatives.
pub const FD_STEP: f64 = 1e-5;

/// A potential `h` on a Riemannian manifold `(ℝⁿ, g)` with flow rate `η`.
pub trait FlowProblem {
    fn dim(&self) -> usize;

    fn eta(&self) -> f64;

    fn potential(&self, phi: &[f64]) -> Result<f64>;

    fn gradient(&self, phi: &[f64]) -> Result<Vec<f64>>;

    /// `g_{IJ}(φ)`.
    fn metric(&self, phi: &[f64]) -> Result<DenseMatrix>;

    fn has_constant_metric(&self) -> bool {
        false
    }

    /// `g^{IJ}(φ) v_J`.
    fn inverse_metric_apply(&self, phi: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        solve_spd(&self.metric(phi)?, v)
    }

    /// `(∂²h) w`, by central differences of the gradient unless overridden.
    fn hessian_vector(&self, phi: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let wn = linalg::norm(w);
        if wn == 0.0 {
            return Ok(vec![0.0; self.dim()]);
        }
        let h = FD_STEP * (1.0 + linalg::norm(phi)) / wn;
        let plus: Vec<f64> = phi.iter().zip(w).map(|(p, d)| p + h * d).collect();
        let minus: Vec<f64> = phi.iter().zip(w).map(|(p, d)| p - h * d).collect();
        let gp = self.gradient(&plus)?;
        let gm = self.gradient(&minus)?;
        Ok(gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h))
            .collect())
    }

    /// `∂_I (uᵀ g⁻¹ u) = g^{KL}_{,I} u_K u_L` for every `I`; central
    /// differences unless the metric is constant or overridden.
    fn inverse_metric_form_gradient(&self, phi: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if self.has_constant_metric() {
            return Ok(vec![0.0; n]);
        }
        let mut out = Vec::with_capacity(n);
        let mut x = phi.to_vec();
        for i in 0..n {
            let h = FD_STEP * (1.0 + phi[i].abs());
            x[i] = phi[i] + h;
            let fp = linalg::dot(u, &self.inverse_metric_apply(&x, u)?);
            x[i] = phi[i] - h;
            let fm = linalg::dot(u, &self.inverse_metric_apply(&x, u)?);
            x[i] = phi[i];
            out.push((fp - fm) / (2.0 * h));
        }
        Ok(out)
    }
}

fn random_spd(rng: &mut SplitMix64, n: usize) -> Result<DenseMatrix> {
    let b = DenseMatrix::new(n, n, rng.normal_vec(n * n))?;
    let mut m = b.tr_matmul(&b)?.scaled(1.0 / n as f64);
    m.add_diagonal(&vec![0.5; n])?;
    Ok(m)
}

/// How the metric varies over the quadratic test problems.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricField {
    Constant(DenseMatrix),
    /// `g(φ) = (1 + c‖φ‖²) G₀`.
    Conformal {
        base: DenseMatrix,
        c: f64,
    },
}

/// `h(φ) = ½ φᵀAφ − bᵀφ` with analytic gradient, Hessian and metric derivatives.
#[derive(Clone, Debug)]
pub struct QuadraticProblem {
    pub a: DenseMatrix,
    pub b: Vec<f64>,
    pub metric: MetricField,
    pub eta: f64,
}

impl QuadraticProblem {
    pub fn new(a: DenseMatrix, b: Vec<f64>, metric: MetricField, eta: f64) -> Result<Self> {
        check_dim("quadratic linear term", a.rows(), b.len())?;
        let base = match &metric {
            MetricField::Constant(g) | MetricField::Conformal { base: g, .. } => g,
        };
        check_dim("quadratic metric", a.rows(), base.rows())?;
        linalg::cholesky_upper(base)?;
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::InvalidArgument("eta must be non-negative".into()));
        }
        Ok(Self {
            a: a.symmetrized()?,
            b,
            metric,
            eta,
        })
    }

    /// `h = ½‖φ‖²` with a constant metric.
    pub fn isotropic(metric: DenseMatrix, eta: f64) -> Result<Self> {
        let n = metric.rows();
        Self::new(
            DenseMatrix::identity(n),
            vec![0.0; n],
            MetricField::Constant(metric),
            eta,
        )
    }

    /// Random instance: `A` and `G₀` are `BᵀB/n + ½I` for Gaussian `B`, so
    /// their spectra sit roughly in `[½, 4½]`; `b` is standard normal.
    pub fn random(
        rng: &mut SplitMix64,
        n: usize,
        eta: f64,
        conformal: Option<f64>,
    ) -> Result<Self> {
        let a = random_spd(rng, n)?;
        let g = random_spd(rng, n)?;
        let b = rng.normal_vec(n);
        let metric = match conformal {
            Some(c) => MetricField::Conformal { base: g, c },
            None => MetricField::Constant(g),
        };
        Self::new(a, b, metric, eta)
    }

    /// Point where `∇h = 0`.
    pub fn minimizer(&self) -> Result<Vec<f64>> {
        solve_spd(&self.a, &self.b)
    }

    fn conformal_factor(&self, phi: &[f64]) -> f64 {
        match self.metric {
            MetricField::Constant(_) => 1.0,
            MetricField::Conformal { c, .. } => 1.0 + c * linalg::dot(phi, phi),
        }
    }
}

impl FlowProblem for QuadraticProblem {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn eta(&self) -> f64 {
        self.eta
    }

    fn potential(&self, phi: &[f64]) -> Result<f64> {
        let aphi = self.a.matvec(phi)?;
        Ok(0.5 * linalg::dot(phi, &aphi) - linalg::dot(&self.b, phi))
    }

    fn gradient(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let mut g = self.a.matvec(phi)?;
        g.iter_mut().zip(&self.b).for_each(|(gi, bi)| *gi -= bi);
        Ok(g)
    }

    fn metric(&self, phi: &[f64]) -> Result<DenseMatrix> {
        Ok(match &self.metric {
            MetricField::Constant(g) => g.clone(),
            MetricField::Conformal { base, .. } => base.scaled(self.conformal_factor(phi)),
        })
    }

    fn has_constant_metric(&self) -> bool {
        matches!(self.metric, MetricField::Constant(_))
    }

    fn hessian_vector(&self, _phi: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        self.a.matvec(w)
    }

    fn inverse_metric_form_gradient(&self, phi: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        match &self.metric {
            MetricField::Constant(_) => Ok(vec![0.0; self.dim()]),
            MetricField::Conformal { base, c } => {
                // g⁻¹ = G₀⁻¹/f, f = 1 + c‖φ‖², so ∂_I g⁻¹ = −2cφ_I G₀⁻¹/f².
                let f = self.conformal_factor(phi);
                let q = linalg::dot(u, &solve_spd(base, u)?);
                Ok(phi.iter().map(|p| -2.0 * c * p * q / (f * f)).collect())
            }
        }
    }
}

/// Empirical risk of a small network as a flow problem; the metric is the
/// dense block-diagonal layerwise metric `⊕ G^(α)(φ)`.
pub struct NeuralFlowProblem {
    pub network: Network,
    pub batch: Vec<Sample>,
    pub config: OptimizerConfig,
    pub eta: f64,
}

/// Largest parameter count for which the dense metric is materialized.
pub const NEURAL_FLOW_MAX_PARAMS: usize = 200;

pub fn neural_flow_problem(
    network: Network,
    batch: Vec<Sample>,
    loss: LossKind,
    mut config: OptimizerConfig,
    eta: f64,
) -> Result<NeuralFlowProblem> {
    if network.param_count() > NEURAL_FLOW_MAX_PARAMS {
        return Err(Error::InvalidArgument(format!(
            "neural flow problem limited to {NEURAL_FLOW_MAX_PARAMS} parameters, got {}",
            network.param_count()
        )));
    }
    for s in &batch {
        check_dim("flow sample input", network.input_dim(), s.input.len())?;
        check_dim("flow sample target", network.output_dim(), s.target.len())?;
    }
    config.loss = loss;
    config.validate(network.layer_count())?;
    Ok(NeuralFlowProblem {
        network,
        batch,
        config,
        eta,
    })
}

impl NeuralFlowProblem {
    fn params(&self, phi: &[f64]) -> Result<crate::graph::ParameterState> {
        self.network.params_from_vec(phi.to_vec())
    }

    /// Riemannian flow direction `g⁻¹∇h` using the per-layer Woodbury path.
    pub fn woodbury_direction(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let params = self.params(phi)?;
        let eval = evaluate_batch(&self.network, &params, &self.batch, self.config.loss)?;
        let grad = batch_gradient(&self.network, &eval)?;
        let mut out = Vec::with_capacity(grad.len());
        for m in assemble_layer_metrics(&self.network, &eval, &self.config)? {
            out.extend(crate::metric::riemannian_gradient(
                &m,
                &grad[params.block_range(m.layer)],
            )?);
        }
        Ok(out)
    }
}

impl FlowProblem for NeuralFlowProblem {
    fn dim(&self) -> usize {
        self.network.param_count()
    }

    fn eta(&self) -> f64 {
        self.eta
    }

    fn potential(&self, phi: &[f64]) -> Result<f64> {
        Ok(evaluate_batch(
            &self.network,
            &self.params(phi)?,
            &self.batch,
            self.config.loss,
        )?
        .loss)
    }

    fn gradient(&self, phi: &[f64]) -> Result<Vec<f64>> {
        let eval = evaluate_batch(
            &self.network,
            &self.params(phi)?,
            &self.batch,
            self.config.loss,
        )?;
        batch_gradient(&self.network, &eval)
    }

    fn metric(&self, phi: &[f64]) -> Result<DenseMatrix> {
        let eval = evaluate_batch(
            &self.network,
            &self.params(phi)?,
            &self.batch,
            self.config.loss,
        )?;
        let blocks: Vec<DenseMatrix> = assemble_layer_metrics(&self.network, &eval, &self.config)?
            .iter()
            .map(|m| m.to_dense())
            .collect();
        Ok(DenseMatrix::block_diagonal(&blocks))
    }

    fn has_constant_metric(&self) -> bool {
        !self.config.pullback
    }
}
