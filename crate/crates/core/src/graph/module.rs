use std::fmt;

use crate::error::{Error, Result};

/// Pointwise nonlinearity. `relu'(0)` is taken to be 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModuleKind {
    Linear,
    Bias,
    PointwiseNonlinearity,
    Sequential,
    Parallel,
}

/// A Riemannian module over real coordinate spaces.
///
/// Leaves are the parameterized `Linear` and `Bias` maps and the
/// parameter-free pointwise nonlinearities; `Sequential` and `Parallel`
/// compose them. The metric on every intermediate space is the pullback of
/// the output metric, so composition never has to reconcile two metrics.
#[derive(Clone, Debug, PartialEq)]
pub enum Module {
    /// `y = A x` with `A` stored row-major (`output_dim × input_dim`).
    Linear {
        input_dim: usize,
        output_dim: usize,
    },
    /// `y = x + b`.
    Bias {
        dim: usize,
    },
    Pointwise {
        dim: usize,
        activation: Activation,
    },
    Sequential(Vec<Module>),
    /// Cartesian product: the input is split and the outputs concatenated.
    Parallel(Vec<Module>),
}

impl Module {
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Module::Linear {
            input_dim,
            output_dim,
        }
    }

    pub fn bias(dim: usize) -> Self {
        Module::Bias { dim }
    }

    pub fn pointwise(activation: Activation, dim: usize) -> Self {
        Module::Pointwise { dim, activation }
    }

    pub fn relu(dim: usize) -> Self {
        Self::pointwise(Activation::Relu, dim)
    }

    pub fn tanh(dim: usize) -> Self {
        Self::pointwise(Activation::Tanh, dim)
    }

    /// Chains modules left to right, checking that adjacent dims agree.
    pub fn sequential(children: Vec<Module>) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::InvalidArgument("empty sequential module".into()));
        }
        for pair in children.windows(2) {
            if pair[1].input_dim() != pair[0].output_dim() {
                return Err(Error::DimensionMismatch {
                    context: "sequential composition",
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        Ok(Module::Sequential(children))
    }

    pub fn parallel(children: Vec<Module>) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::InvalidArgument("empty parallel module".into()));
        }
        Ok(Module::Parallel(children))
    }

    /// `m2 ∘ m1`.
    pub fn compose_sequential(m1: Module, m2: Module) -> Result<Self> {
        Self::sequential(vec![m1, m2])
    }

    pub fn compose_parallel(m1: Module, m2: Module) -> Result<Self> {
        Self::parallel(vec![m1, m2])
    }

    /// Fully connected stack `Linear → Bias → activation` per hidden layer,
    /// with a final `Linear → Bias` readout.
    pub fn mlp(dims: &[usize], activation: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("mlp needs at least two dims".into()));
        }
        let mut layers = Vec::new();
        for (k, pair) in dims.windows(2).enumerate() {
            layers.push(Module::linear(pair[0], pair[1]));
            layers.push(Module::bias(pair[1]));
            if k + 2 < dims.len() {
                layers.push(Module::pointwise(activation, pair[1]));
            }
        }
        Self::sequential(layers)
    }

    pub fn kind(&self) -> ModuleKind {
        match self {
            Module::Linear { .. } => ModuleKind::Linear,
            Module::Bias { .. } => ModuleKind::Bias,
            Module::Pointwise { .. } => ModuleKind::PointwiseNonlinearity,
            Module::Sequential(_) => ModuleKind::Sequential,
            Module::Parallel(_) => ModuleKind::Parallel,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Module::Linear { input_dim, .. } => *input_dim,
            Module::Bias { dim } | Module::Pointwise { dim, .. } => *dim,
            Module::Sequential(c) => c.first().map_or(0, Module::input_dim),
            Module::Parallel(c) => c.iter().map(Module::input_dim).sum(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Module::Linear { output_dim, .. } => *output_dim,
            Module::Bias { dim } | Module::Pointwise { dim, .. } => *dim,
            Module::Sequential(c) => c.last().map_or(0, Module::output_dim),
            Module::Parallel(c) => c.iter().map(Module::output_dim).sum(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Module::Linear {
                input_dim,
                output_dim,
            } => input_dim * output_dim,
            Module::Bias { dim } => *dim,
            Module::Pointwise { .. } => 0,
            Module::Sequential(c) | Module::Parallel(c) => c.iter().map(Module::param_count).sum(),
        }
    }

    /// Parameter counts of the parameterized leaves in traversal order.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_layer_sizes(&mut out);
        out
    }

    fn collect_layer_sizes(&self, out: &mut Vec<usize>) {
        match self {
            Module::Linear { .. } | Module::Bias { .. } => out.push(self.param_count()),
            Module::Pointwise { .. } => {}
            Module::Sequential(c) | Module::Parallel(c) => {
                c.iter().for_each(|m| m.collect_layer_sizes(out))
            }
        }
    }
}

impl fmt::Display for Module {
    /// Same grammar the CLI parses, e.g. `seq(linear(2,3), bias(3), tanh(3))`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Module::Linear {
                input_dim,
                output_dim,
            } => write!(f, "linear({input_dim},{output_dim})"),
            Module::Bias { dim } => write!(f, "bias({dim})"),
            Module::Pointwise { dim, activation } => write!(f, "{}({dim})", activation.name()),
            Module::Sequential(c) | Module::Parallel(c) => {
                let tag = if matches!(self, Module::Sequential(_)) {
                    "seq"
                } else {
                    "par"
                };
                write!(f, "{tag}(")?;
                for (i, m) in c.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{m}")?;
                }
                write!(f, ")")
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_dims_are_sums() {
        let m = Module::compose_parallel(Module::linear(2, 1), Module::linear(3, 2)).unwrap();
        assert_eq!(m.input_dim(), 5);
        assert_eq!(m.output_dim(), 3);
        assert_eq!(m.param_count(), 2 + 6);
        assert_eq!(m.kind(), ModuleKind::Parallel);
    }

    #[test]
    fn sequential_rejects_mismatch() {
        let err = Module::compose_sequential(Module::linear(2, 3), Module::linear(2, 1));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn mlp_layout() {
        let m = Module::mlp(&[4, 8, 2], Activation::Tanh).unwrap();
        assert_eq!(m.layer_sizes(), vec![32, 8, 16, 2]);
        assert_eq!(
            m.to_string(),
            "seq(linear(4,8), bias(8), tanh(8), linear(8,2), bias(2))"
        );
    }

    #[test]
    fn relu_subgradient_at_zero() {
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
        assert_eq!(Activation::Relu.derivative(1e-300), 1.0);
    }
}
