use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use super::module::{Activation, Module};
use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::DenseMatrix;
use crate::rng::SplitMix64;

static NEXT_NETWORK_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Linear { input_dim: usize, output_dim: usize },
    Bias,
    Pointwise(Activation),
}

/// One leaf of a compiled module graph. Ranges index the activation arena.
#[derive(Clone, Debug, PartialEq)]
pub struct Op {
    pub kind: OpKind,
    pub input: Range<usize>,
    pub output: Range<usize>,
    /// Parameter layer index, for parameterized leaves.
    pub layer: Option<usize>,
}

/// Flat parameter vector partitioned into per-layer blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterState {
    values: Vec<f64>,
    blocks: Vec<Range<usize>>,
}

impl ParameterState {
    pub fn from_sizes(sizes: &[usize], values: Vec<f64>) -> Result<Self> {
        check_dim("ParameterState", sizes.iter().sum(), values.len())?;
        let mut blocks = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &n in sizes {
            blocks.push(start..start + n);
            start += n;
        }
        Ok(Self { values, blocks })
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Self::from_sizes(sizes, vec![0.0; sizes.iter().sum()]).expect("sizes match")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_range(&self, layer: usize) -> Range<usize> {
        self.blocks[layer].clone()
    }

    pub fn block(&self, layer: usize) -> &[f64] {
        &self.values[self.blocks[layer].clone()]
    }

    pub fn block_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.blocks[layer].clone();
        &mut self.values[r]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|r| r.len()).collect()
    }

    /// Same block layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_dim(
            "ParameterState::with_values",
            self.values.len(),
            values.len(),
        )?;
        Ok(Self {
            values,
            blocks: self.blocks.clone(),
        })
    }
}

/// Activation record of one forward evaluation.
#[derive(Clone, Debug)]
pub struct Tape {
    network_id: u64,
    params: Vec<f64>,
    arena: Vec<f64>,
}

impl Tape {
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn activation(&self, range: Range<usize>) -> &[f64] {
        &self.arena[range]
    }
}

/// Adjoint covector at the output activation of one op (the Lagrange
/// multiplier of that op's constraint).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdjoint {
    pub op: usize,
    pub layer: Option<usize>,
    pub covector: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adjoints {
    /// One entry per op, in op order.
    pub ops: Vec<LayerAdjoint>,
    /// Covector pulled back to the network input.
    pub input: Vec<f64>,
    /// Flat parameter gradient, block layout of [`ParameterState`].
    pub gradient: Vec<f64>,
}

/// `∂y/∂w^(α)` for one parameter layer, `n_o × n_α`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerJacobian {
    pub layer: usize,
    pub matrix: DenseMatrix,
}

/// A module graph lowered to a flat list of leaf ops over one activation arena.
#[derive(Clone, Debug)]
pub struct Network {
    id: u64,
    module: Module,
    ops: Vec<Op>,
    arena_len: usize,
    input: Range<usize>,
    output: Range<usize>,
    layer_sizes: Vec<usize>,
    layer_ops: Vec<usize>,
    layer_fan_in: Vec<usize>,
}

struct Lowering {
    ops: Vec<Op>,
    arena_len: usize,
    layer_sizes: Vec<usize>,
    layer_ops: Vec<usize>,
    layer_fan_in: Vec<usize>,
    last_fan_in: usize,
}

impl Lowering {
    fn alloc(&mut self, n: usize) -> Range<usize> {
        let r = self.arena_len..self.arena_len + n;
        self.arena_len += n;
        r
    }

    fn push_layer(
        &mut self,
        kind: OpKind,
        input: Range<usize>,
        output: Range<usize>,
        size: usize,
        fan_in: usize,
    ) {
        let layer = self.layer_sizes.len();
        self.layer_sizes.push(size);
        self.layer_ops.push(self.ops.len());
        self.layer_fan_in.push(fan_in);
        self.ops.push(Op {
            kind,
            input,
            output,
            layer: Some(layer),
        });
    }

    fn lower(&mut self, m: &Module, input: Range<usize>, output: Range<usize>) {
        match m {
            Module::Linear {
                input_dim,
                output_dim,
            } => {
                self.last_fan_in = *input_dim;
                let kind = OpKind::Linear {
                    input_dim: *input_dim,
                    output_dim: *output_dim,
                };
                self.push_layer(kind, input, output, input_dim * output_dim, *input_dim);
            }
            Module::Bias { dim } => {
                let fan_in = self.last_fan_in;
                self.push_layer(OpKind::Bias, input, output, *dim, fan_in);
            }
            Module::Pointwise { activation, .. } => self.ops.push(Op {
                kind: OpKind::Pointwise(*activation),
                input,
                output,
                layer: None,
            }),
            Module::Sequential(children) => {
                let mut current = input;
                for (k, child) in children.iter().enumerate() {
                    let next = if k + 1 == children.len() {
                        output.clone()
                    } else {
                        self.alloc(child.output_dim())
                    };
                    self.lower(child, current, next.clone());
                    current = next;
                }
            }
            Module::Parallel(children) => {
                let (mut i0, mut o0) = (input.start, output.start);
                for child in children {
                    let (ni, no) = (child.input_dim(), child.output_dim());
                    self.lower(child, i0..i0 + ni, o0..o0 + no);
                    i0 += ni;
                    o0 += no;
                }
            }
        }
    }
}

impl Network {
    pub fn new(module: Module) -> Result<Self> {
        validate(&module)?;
        let (n_in, n_out) = (module.input_dim(), module.output_dim());
        let mut lowering = Lowering {
            ops: Vec::new(),
            arena_len: n_in + n_out,
            layer_sizes: Vec::new(),
            layer_ops: Vec::new(),
            layer_fan_in: Vec::new(),
            last_fan_in: 1,
        };
        let input = 0..n_in;
        let output = n_in..n_in + n_out;
        lowering.lower(&module, input.clone(), output.clone());
        Ok(Self {
            id: NEXT_NETWORK_ID.fetch_add(1, Ordering::Relaxed),
            module,
            ops: lowering.ops,
            arena_len: lowering.arena_len,
            input,
            output,
            layer_sizes: lowering.layer_sizes,
            layer_ops: lowering.layer_ops,
            layer_fan_in: lowering.layer_fan_in,
        })
    }

    pub fn module(&self) -> &Module {
        &self.module
    }

    pub fn ops(&self) -> &[Op] {
        &self.ops
    }

    pub fn input_dim(&self) -> usize {
        self.input.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output.len()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes.iter().sum()
    }

    /// Op index of parameter layer `layer`.
    pub fn layer_op(&self, layer: usize) -> usize {
        self.layer_ops[layer]
    }

    pub fn zero_params(&self) -> ParameterState {
        ParameterState::zeros(&self.layer_sizes)
    }

    /// Uniform in `±1/√fan_in` per layer. A bias uses the fan-in of the most
    /// recent linear map before it in traversal order (1 if none).
    pub fn init_params(&self, rng: &mut SplitMix64) -> ParameterState {
        let mut values = Vec::with_capacity(self.param_count());
        for (&n, &fan_in) in self.layer_sizes.iter().zip(&self.layer_fan_in) {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            values.extend((0..n).map(|_| rng.uniform_range(-bound, bound)));
        }
        ParameterState::from_sizes(&self.layer_sizes, values).expect("layout")
    }

    pub fn params_from_vec(&self, values: Vec<f64>) -> Result<ParameterState> {
        ParameterState::from_sizes(&self.layer_sizes, values)
    }

    fn check_params(&self, params: &ParameterState) -> Result<()> {
        check_dim("parameter count", self.param_count(), params.len())?;
        if params.sizes() != self.layer_sizes {
            return Err(Error::InvalidArgument(
                "parameter block layout does not match network".into(),
            ));
        }
        Ok(())
    }

    fn check_tape(&self, tape: &Tape) -> Result<()> {
        if tape.network_id != self.id || tape.arena.len() != self.arena_len {
            Err(Error::StaleTape)
        } else {
            Ok(())
        }
    }

    fn layer_params<'a>(&self, params: &'a [f64], layer: usize) -> &'a [f64] {
        let start: usize = self.layer_sizes[..layer].iter().sum();
        &params[start..start + self.layer_sizes[layer]]
    }

    fn layer_offset(&self, layer: usize) -> usize {
        self.layer_sizes[..layer].iter().sum()
    }

    /// Evaluates the network, recording every intermediate activation.
    pub fn forward(&self, params: &ParameterState, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
        check_dim("forward input", self.input_dim(), x.len())?;
        self.check_params(params)?;
        let mut arena = vec![0.0; self.arena_len];
        arena[self.input.clone()].copy_from_slice(x);
        let p = params.values();
        for op in &self.ops {
            let (input, out) = split_io(&mut arena, &op.input, &op.output);
            match op.kind {
                OpKind::Linear {
                    input_dim,
                    output_dim,
                } => {
                    let a = self.layer_params(p, op.layer.unwrap());
                    for j in 0..output_dim {
                        out[j] = crate::linalg::dot(&a[j * input_dim..(j + 1) * input_dim], input);
                    }
                }
                OpKind::Bias => {
                    let b = self.layer_params(p, op.layer.unwrap());
                    for ((o, x), b) in out.iter_mut().zip(input).zip(b) {
                        *o = x + b;
                    }
                }
                OpKind::Pointwise(act) => {
                    for (o, x) in out.iter_mut().zip(input) {
                        *o = act.apply(*x);
                    }
                }
            }
        }
        let y = arena[self.output.clone()].to_vec();
        check_finite("forward output", &y)?;
        Ok((
            y,
            Tape {
                network_id: self.id,
                params: p.to_vec(),
                arena,
            },
        ))
    }

    /// Pulls `adj_out` at the output of `op` back to its input
    /// (`adj_in += Jᵀ adj_out`) and, when `grad` is given, to its parameters.
    fn op_vjp(
        &self,
        tape: &Tape,
        op: &Op,
        adj_out: &[f64],
        adj_in: &mut [f64],
        grad: Option<&mut [f64]>,
    ) {
        let x = &tape.arena[op.input.clone()];
        match op.kind {
            OpKind::Linear {
                input_dim,
                output_dim,
            } => {
                let a = self.layer_params(&tape.params, op.layer.unwrap());
                for j in 0..output_dim {
                    let lj = adj_out[j];
                    if lj != 0.0 {
                        crate::linalg::axpy(lj, &a[j * input_dim..(j + 1) * input_dim], adj_in);
                    }
                }
                if let Some(g) = grad {
                    for j in 0..output_dim {
                        let lj = adj_out[j];
                        if lj != 0.0 {
                            crate::linalg::axpy(lj, x, &mut g[j * input_dim..(j + 1) * input_dim]);
                        }
                    }
                }
            }
            OpKind::Bias => {
                for (i, o) in adj_in.iter_mut().zip(adj_out) {
                    *i += o;
                }
                if let Some(g) = grad {
                    for (gi, o) in g.iter_mut().zip(adj_out) {
                        *gi += o;
                    }
                }
            }
            OpKind::Pointwise(act) => {
                for ((i, o), xi) in adj_in.iter_mut().zip(adj_out).zip(x) {
                    *i += o * act.derivative(*xi);
                }
            }
        }
    }

    /// Reverse sweep seeded with `covector` at the output. Returns the full
    /// adjoint arena and the flat parameter gradient.
    fn reverse_sweep(
        &self,
        tape: &Tape,
        covector: &[f64],
        want_grad: bool,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut adj = vec![0.0; self.arena_len];
        adj[self.output.clone()].copy_from_slice(covector);
        let mut grad = if want_grad {
            vec![0.0; self.param_count()]
        } else {
            Vec::new()
        };
        for op in self.ops.iter().rev() {
            let g = match (want_grad, op.layer) {
                (true, Some(layer)) => {
                    let off = self.layer_offset(layer);
                    Some(&mut grad[off..off + self.layer_sizes[layer]])
                }
                _ => None,
            };
            let (adj_out, adj_in) = split_io(&mut adj, &op.output, &op.input);
            self.op_vjp(tape, op, adj_out, adj_in, g);
        }
        (adj, grad)
    }

    /// Backpropagates an output covector, returning the adjoint at every op
    /// output, at the input, and the parameter gradient.
    pub fn backward_adjoints(&self, tape: &Tape, output_covector: &[f64]) -> Result<Adjoints> {
        self.check_tape(tape)?;
        check_dim("output covector", self.output_dim(), output_covector.len())?;
        let (adj, gradient) = self.reverse_sweep(tape, output_covector, true);
        let ops = self
            .ops
            .iter()
            .enumerate()
            .map(|(i, op)| LayerAdjoint {
                op: i,
                layer: op.layer,
                covector: adj[op.output.clone()].to_vec(),
            })
            .collect();
        Ok(Adjoints {
            ops,
            input: adj[self.input.clone()].to_vec(),
            gradient,
        })
    }

    /// `(∂f^(α)/∂w^(α))ᵀ λ_α`: pulls an adjoint at a layer's output back to
    /// that layer's parameters.
    pub fn layer_gradient(&self, tape: &Tape, layer: usize, adjoint: &[f64]) -> Result<Vec<f64>> {
        self.check_tape(tape)?;
        let op = &self.ops[self.layer_ops[layer]];
        check_dim("layer adjoint", op.output.len(), adjoint.len())?;
        let mut sink = vec![0.0; op.input.len()];
        let mut grad = vec![0.0; self.layer_sizes[layer]];
        self.op_vjp(tape, op, adjoint, &mut sink, Some(&mut grad));
        Ok(grad)
    }

    /// Per-layer output Jacobians via one reverse sweep per output coordinate.
    pub fn output_jacobians(&self, tape: &Tape) -> Result<Vec<LayerJacobian>> {
        self.check_tape(tape)?;
        let n_o = self.output_dim();
        let mut mats: Vec<DenseMatrix> = self
            .layer_sizes
            .iter()
            .map(|&n| DenseMatrix::zeros(n_o, n))
            .collect();
        let mut seed = vec![0.0; n_o];
        for r in 0..n_o {
            seed[r] = 1.0;
            let (_, grad) = self.reverse_sweep(tape, &seed, true);
            seed[r] = 0.0;
            let mut off = 0;
            for (m, &n) in mats.iter_mut().zip(&self.layer_sizes) {
                m.row_mut(r).copy_from_slice(&grad[off..off + n]);
                off += n;
            }
        }
        Ok(mats
            .into_iter()
            .enumerate()
            .map(|(layer, matrix)| LayerJacobian { layer, matrix })
            .collect())
    }

    pub fn layer_jacobian(&self, tape: &Tape, layer: usize) -> Result<LayerJacobian> {
        if layer >= self.layer_count() {
            return Err(Error::InvalidArgument(format!(
                "no parameter layer {layer}"
            )));
        }
        let mut all = self.output_jacobians(tape)?;
        Ok(all.swap_remove(layer))
    }

    /// `∂y/∂w` for the parameters of op `op`; `n_o × 0` for parameter-free ops.
    pub fn op_jacobian(&self, tape: &Tape, op: usize) -> Result<DenseMatrix> {
        match self.ops.get(op).and_then(|o| o.layer) {
            Some(layer) => Ok(self.layer_jacobian(tape, layer)?.matrix),
            None if op < self.ops.len() => {
                self.check_tape(tape)?;
                Ok(DenseMatrix::zeros(self.output_dim(), 0))
            }
            None => Err(Error::InvalidArgument(format!("no op {op}"))),
        }
    }

    /// Pulls a factor `L_y` of the metric on op `op`'s output back to its
    /// input: `L_x = L_y · ∂z_out/∂z_in`, so `L_xᵀL_x` is the pullback metric.
    pub fn pullback_factor(
        &self,
        tape: &Tape,
        op: usize,
        l_y: &DenseMatrix,
    ) -> Result<DenseMatrix> {
        self.check_tape(tape)?;
        let o = self
            .ops
            .get(op)
            .ok_or_else(|| Error::InvalidArgument(format!("no op {op}")))?;
        check_dim("pullback factor", o.output.len(), l_y.cols())?;
        let mut l_x = DenseMatrix::zeros(l_y.rows(), o.input.len());
        for r in 0..l_y.rows() {
            self.op_vjp(tape, o, l_y.row(r), l_x.row_mut(r), None);
        }
        Ok(l_x)
    }

    /// Pulls an output factor all the way back to the network input.
    pub fn pullback_to_input(&self, tape: &Tape, l_y: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_tape(tape)?;
        check_dim("pullback factor", self.output_dim(), l_y.cols())?;
        let mut l_x = DenseMatrix::zeros(l_y.rows(), self.input_dim());
        for r in 0..l_y.rows() {
            let (adj, _) = self.reverse_sweep(tape, l_y.row(r), false);
            l_x.row_mut(r).copy_from_slice(&adj[self.input.clone()]);
        }
        Ok(l_x)
    }

    /// Scaled Jacobians `K^(α) = L_o J^(α)` for every layer, obtained by
    /// seeding reverse sweeps with the rows of `L_o`.
    pub fn scaled_jacobians(&self, tape: &Tape, l_o: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        self.check_tape(tape)?;
        check_dim("output factor", self.output_dim(), l_o.cols())?;
        let mut mats: Vec<DenseMatrix> = self
            .layer_sizes
            .iter()
            .map(|&n| DenseMatrix::zeros(l_o.rows(), n))
            .collect();
        for r in 0..l_o.rows() {
            let (_, grad) = self.reverse_sweep(tape, l_o.row(r), true);
            let mut off = 0;
            for (m, &n) in mats.iter_mut().zip(&self.layer_sizes) {
                m.row_mut(r).copy_from_slice(&grad[off..off + n]);
                off += n;
            }
        }
        Ok(mats)
    }
}

/// Disjoint views of two non-overlapping arena ranges: `src` shared, `dst` mutable.
fn split_io<'a>(
    arena: &'a mut [f64],
    src: &Range<usize>,
    dst: &Range<usize>,
) -> (&'a [f64], &'a mut [f64]) {
    debug_assert!(src.end <= dst.start || dst.end <= src.start);
    if src.end <= dst.start {
        let (lo, hi) = arena.split_at_mut(dst.start);
        (&lo[src.clone()], &mut hi[..dst.len()])
    } else {
        let (lo, hi) = arena.split_at_mut(src.start);
        (&hi[..src.len()], &mut lo[dst.clone()])
    }
}

fn validate(m: &Module) -> Result<()> {
    match m {
        Module::Linear {
            input_dim,
            output_dim,
        } if *input_dim == 0 || *output_dim == 0 => Err(Error::InvalidArgument(
            "linear layer with zero dimension".into(),
        )),
        Module::Bias { dim } | Module::Pointwise { dim, .. } if *dim == 0 => {
            Err(Error::InvalidArgument("zero-dimensional module".into()))
        }
        Module::Sequential(c) => {
            if c.is_empty() {
                return Err(Error::InvalidArgument("empty sequential module".into()));
            }
            for pair in c.windows(2) {
                check_dim(
                    "sequential composition",
                    pair[0].output_dim(),
                    pair[1].input_dim(),
                )?;
            }
            c.iter().try_for_each(validate)
        }
        Module::Parallel(c) => {
            if c.is_empty() {
                return Err(Error::InvalidArgument("empty parallel module".into()));
            }
            c.iter().try_for_each(validate)
        }
        _ => Ok(()),
    }
}
