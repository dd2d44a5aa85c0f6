//! Output metrics and the layerwise metric `G = D + KᵀK`, applied through
//! the Woodbury identity so only `n_o × n_o` systems are ever factorized.

use std::cell::OnceCell;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{self, cholesky_upper, DenseMatrix, DiagonalMatrix, UpperTriangularFactor};
use crate::loss::softmax;

#[derive(Clone, Debug, PartialEq)]
pub enum OutputMetricKind {
    Identity,
    /// `diag(p) − ppᵀ + εI` with `p = softmax(y)`.
    GaussNewtonSoftmaxCE,
    /// `diag(values) + εI`.
    UserDiagonal(Vec<f64>),
}

impl OutputMetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            OutputMetricKind::Identity => "identity",
            OutputMetricKind::GaussNewtonSoftmaxCE => "gauss_newton_softmax_ce",
            OutputMetricKind::UserDiagonal(_) => "user_diagonal",
        }
    }
}

/// Metric on the output space together with its upper Cholesky factor.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMetric {
    pub kind: OutputMetricKind,
    pub epsilon: f64,
    pub factor: UpperTriangularFactor,
}

impl OutputMetric {
    pub fn identity(n_o: usize) -> Self {
        Self {
            kind: OutputMetricKind::Identity,
            epsilon: 0.0,
            factor: UpperTriangularFactor::identity(n_o),
        }
    }

    pub fn dim(&self) -> usize {
        self.factor.dim()
    }

    pub fn is_identity(&self) -> bool {
        self.kind == OutputMetricKind::Identity
    }

    /// `M = L_oᵀ L_o`.
    pub fn matrix(&self) -> DenseMatrix {
        self.factor.reconstruct()
    }
}

/// Builds `M(y)` and its factor. `epsilon` is ignored for the identity metric.
pub fn build_output_metric(
    kind: &OutputMetricKind,
    y: &[f64],
    epsilon: f64,
) -> Result<OutputMetric> {
    let n = y.len();
    if *kind == OutputMetricKind::Identity {
        return Ok(OutputMetric::identity(n));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "output metric regularizer must be positive, got {epsilon}"
        )));
    }
    check_finite("output metric point", y)?;
    let m = match kind {
        OutputMetricKind::GaussNewtonSoftmaxCE => {
            let p = softmax(y);
            let mut m = DenseMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    m[(i, j)] = -p[i] * p[j];
                }
                m[(i, i)] += p[i] + epsilon;
            }
            m
        }
        OutputMetricKind::UserDiagonal(values) => {
            check_dim("user diagonal output metric", n, values.len())?;
            if values.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidArgument(
                    "user diagonal output metric must be non-negative".into(),
                ));
            }
            DenseMatrix::from_diagonal(&values.iter().map(|v| v + epsilon).collect::<Vec<_>>())
        }
        OutputMetricKind::Identity => unreachable!(),
    };
    Ok(OutputMetric {
        kind: kind.clone(),
        epsilon,
        factor: cholesky_upper(&m)?,
    })
}

/// Layer metric `D + KᵀK` held implicitly as the pair `(D, K)`. Cholesky
/// factors are computed on first use and reused.
#[derive(Clone, Debug)]
pub struct LayerMetric {
    pub layer: usize,
    pub mass: DiagonalMatrix,
    /// `K = L_o J`, shape `r × n_α` (`r = n_o`, or `B·n_o` for a stacked batch).
    pub scaled_jacobian: DenseMatrix,
    inner_factor: OnceCell<UpperTriangularFactor>,
    dense_factor: OnceCell<UpperTriangularFactor>,
}

impl PartialEq for LayerMetric {
    fn eq(&self, other: &Self) -> bool {
        self.layer == other.layer
            && self.mass == other.mass
            && self.scaled_jacobian == other.scaled_jacobian
    }
}

impl LayerMetric {
    pub fn new(layer: usize, mass: DiagonalMatrix, scaled_jacobian: DenseMatrix) -> Result<Self> {
        check_dim("layer metric", mass.dim(), scaled_jacobian.cols())?;
        if !scaled_jacobian.is_finite() {
            return Err(Error::NonFinite("scaled jacobian"));
        }
        Ok(Self {
            layer,
            mass,
            scaled_jacobian,
            inner_factor: OnceCell::new(),
            dense_factor: OnceCell::new(),
        })
    }

    /// Metric with the pullback term switched off (`K` has no rows).
    pub fn mass_only(layer: usize, mass: DiagonalMatrix) -> Self {
        let n = mass.dim();
        Self {
            layer,
            mass,
            scaled_jacobian: DenseMatrix::zeros(0, n),
            inner_factor: OnceCell::new(),
            dense_factor: OnceCell::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mass.dim()
    }

    /// `S = I + K D⁻¹ Kᵀ`.
    pub fn inner_matrix(&self) -> DenseMatrix {
        let k = &self.scaled_jacobian;
        let r = k.rows();
        let inv_d: Vec<f64> = self.mass.diagonal().iter().map(|d| 1.0 / d).collect();
        let mut kd = Vec::with_capacity(k.rows() * k.cols());
        for i in 0..r {
            kd.extend(k.row(i).iter().zip(&inv_d).map(|(a, b)| a * b));
        }
        let n = k.cols();
        let mut s = DenseMatrix::identity(r);
        for i in 0..r {
            for j in 0..=i {
                let v = linalg::dot(&kd[i * n..(i + 1) * n], k.row(j));
                s[(i, j)] += v;
                if i != j {
                    s[(j, i)] += v;
                }
            }
        }
        s
    }

    fn inner_factor(&self) -> Result<&UpperTriangularFactor> {
        if let Some(f) = self.inner_factor.get() {
            return Ok(f);
        }
        let f = linalg::cholesky_upper_unchecked(self.inner_matrix())?;
        Ok(self.inner_factor.get_or_init(|| f))
    }

    fn dense_factor(&self) -> Result<&UpperTriangularFactor> {
        if let Some(f) = self.dense_factor.get() {
            return Ok(f);
        }
        let f = linalg::cholesky_upper_unchecked(self.to_dense())?;
        Ok(self.dense_factor.get_or_init(|| f))
    }

    /// `(D + KᵀK)⁻¹ v`, through whichever of the `r × r` Woodbury system or
    /// the `n_α × n_α` metric is smaller.
    pub fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.scaled_jacobian.rows() < self.dim() {
            return self.woodbury_apply_inverse(v);
        }
        check_dim("metric vector", self.dim(), v.len())?;
        check_finite("metric vector", v)?;
        let out = self.dense_factor()?.solve(v)?;
        check_finite("metric solve result", &out)?;
        Ok(out)
    }

    /// `(D + KᵀK)⁻¹ v` via Woodbury: `D⁻¹v − D⁻¹Kᵀ S⁻¹ K D⁻¹v`.
    pub fn woodbury_apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("woodbury vector", self.dim(), v.len())?;
        check_finite("woodbury vector", v)?;
        let a = self.mass.solve(v)?;
        let k = &self.scaled_jacobian;
        if k.rows() == 0 {
            return Ok(a);
        }
        let ka = k.matvec(&a)?;
        let u = self.inner_factor()?.solve(&ka)?;
        let correction = self.mass.solve(&k.tr_matvec(&u)?)?;
        let out: Vec<f64> = a.iter().zip(&correction).map(|(x, c)| x - c).collect();
        check_finite("woodbury result", &out)?;
        Ok(out)
    }

    /// Materializes `D + KᵀK`. Intended for oracles and small problems.
    pub fn to_dense(&self) -> DenseMatrix {
        let k = &self.scaled_jacobian;
        let n = self.dim();
        let mut g = DenseMatrix::from_diagonal(self.mass.diagonal());
        for r in 0..k.rows() {
            let row = k.row(r);
            for i in 0..n {
                let f = row[i];
                if f != 0.0 {
                    linalg::axpy(f, row, g.row_mut(i));
                }
            }
        }
        g
    }

    /// Naive path: materialize `D + KᵀK` and Cholesky-solve the full system.
    pub fn dense_apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim("dense metric vector", self.dim(), v.len())?;
        linalg::cholesky_upper_unchecked(self.to_dense())?.solve(v)
    }
}

pub fn woodbury_apply_inverse(metric: &LayerMetric, v: &[f64]) -> Result<Vec<f64>> {
    metric.woodbury_apply_inverse(v)
}

/// `G⁻¹ g` for a standard gradient `g = Jᵀ ∂ℓ/∂y`.
pub fn riemannian_gradient(metric: &LayerMetric, raw_gradient: &[f64]) -> Result<Vec<f64>> {
    metric.apply_inverse(raw_gradient)
}
