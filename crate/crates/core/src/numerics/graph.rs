//! Define-by-run value graph with reverse-mode differentiation.
//!
//! Every operation is evaluated as soon as it is recorded. The recorded tape
//! can be replayed with new inputs or parameter values through
//! [`Graph::forward`], which is what the finite-difference oracle relies on.
//! All operations treat tensors as matrices: leading dimensions are rows and
//! the trailing dimension is columns.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Input,
    Param,
    Const,
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    Mul,
    /// `x[m, n] + b[n]`
    AddRow,
    /// `x[m, n] * g[n]`
    MulRow,
    /// `x[m, n] * s[m, 1]`
    MulCol,
    Scale(f64),
    Shift(f64),
    Relu,
    Tanh,
    Sigmoid,
    Log,
    Abs,
    Square,
    /// Row softmax; masked-out entries receive exactly zero probability.
    Softmax(Option<Arc<Vec<bool>>>),
    LogSoftmax,
    NormalizeRows,
    LayerNorm { eps: f64 },
    Conv1d { kernel: usize, dilation: usize },
    GatherRows(Arc<Vec<usize>>),
    ConcatCols,
    SliceCols { start: usize, end: usize },
    Sum,
    Mean,
    RowSum,
    Reshape(Vec<usize>),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::Const => "const",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::MulRow => "mul_row",
            Op::MulCol => "mul_col",
            Op::Scale(_) => "scale",
            Op::Shift(_) => "shift",
            Op::Relu => "relu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Log => "log",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::NormalizeRows => "normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::GatherRows(_) => "gather_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::RowSum => "row_sum",
            Op::Reshape(_) => "reshape",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input | Op::Param | Op::Const)
    }

    /// Operations with a derivative discontinuity at zero input.
    pub(crate) fn has_kink(&self) -> bool {
        matches!(self, Op::Relu | Op::Abs)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<F: Scalar> {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<NodeId>,
    pub(crate) value: Tensor<F>,
}

#[derive(Clone, Debug, Default)]
pub struct Graph<F: Scalar = f32> {
    pub(crate) nodes: Vec<Node<F>>,
    params: BTreeMap<String, NodeId>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
    stale: bool,
    grad_acc: BTreeMap<String, Tensor<F>>,
}

fn shape_err(node: usize, op: &Op, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stale: false,
            grad_acc: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> F {
        self.nodes[id.0].value.item()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub(crate) fn param_nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    // ---- leaves ---------------------------------------------------------

    pub fn input(&mut self, name: &str, value: Tensor<F>) -> NodeId {
        let id = self.push_leaf(Op::Input, value);
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push_leaf(Op::Const, value)
    }

    /// Leaf holding a named trainable tensor. Repeated requests for the same
    /// name return the same node so gradients accumulate in one place.
    pub fn param_value(&mut self, name: &str, value: &Tensor<F>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.push_leaf(Op::Param, value.clone());
        self.params.insert(name.to_string(), id);
        id
    }

    fn push_leaf(&mut self, op: Op, value: Tensor<F>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    /// Replace a parameter's value. The graph must be re-evaluated with
    /// [`Graph::forward`] before the next backward pass.
    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let id = *self
            .params
            .get(name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter {name}")))?;
        let node = &mut self.nodes[id.0];
        if node.value.shape() != value.shape() {
            return Err(shape_err(id.0, &node.op, node.value.shape(), value.shape()));
        }
        node.value = value;
        self.stale = true;
        Ok(())
    }

    // ---- evaluation -----------------------------------------------------

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let index = self.nodes.len();
        let value = {
            let args: Vec<&Tensor<F>> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            eval(index, &op, &args)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: index,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(index))
    }

    /// Re-evaluate the recorded tape with the given named inputs, returning
    /// the values of every node marked with [`Graph::mark_output`].
    pub fn forward(
        &mut self,
        inputs: &BTreeMap<String, Tensor<F>>,
    ) -> Result<BTreeMap<String, Tensor<F>>> {
        for (name, value) in inputs {
            let id = *self
                .inputs
                .get(name)
                .ok_or_else(|| Error::Graph(format!("unknown input {name}")))?;
            let node = &mut self.nodes[id.0];
            if node.value.shape() != value.shape() {
                return Err(shape_err(id.0, &node.op, node.value.shape(), value.shape()));
            }
            node.value = value.clone();
        }
        // Inputs not named here keep their previous values.
        self.replay()?;
        Ok(self
            .outputs
            .iter()
            .map(|(k, &id)| (k.clone(), self.nodes[id.0].value.clone()))
            .collect())
    }

    pub(crate) fn replay(&mut self) -> Result<()> {
        self.replay_with(|_, _, _| {})
    }

    /// Replay the tape, calling `observe(index, op, inputs)` before each
    /// non-leaf evaluation.
    pub(crate) fn replay_with(
        &mut self,
        mut observe: impl FnMut(usize, &Op, &[&Tensor<F>]),
    ) -> Result<()> {
        for index in 0..self.nodes.len() {
            if self.nodes[index].op.is_leaf() {
                continue;
            }
            let value = {
                let node = &self.nodes[index];
                let args: Vec<&Tensor<F>> =
                    node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                observe(index, &node.op, &args);
                eval(index, &node.op, &args)?
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: index,
                    op: self.nodes[index].op.name(),
                });
            }
            self.nodes[index].value = value;
        }
        self.stale = false;
        Ok(())
    }

    /// Same tape, evaluated in another scalar type.
    pub fn cast<G: Scalar>(&self) -> Result<Graph<G>> {
        let mut g = Graph::<G> {
            nodes: self
                .nodes
                .iter()
                .map(|n| Node {
                    op: n.op.clone(),
                    inputs: n.inputs.clone(),
                    value: n.value.cast(),
                })
                .collect(),
            params: self.params.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            stale: false,
            grad_acc: BTreeMap::new(),
        };
        g.replay()?;
        Ok(g)
    }

    // ---- differentiation ------------------------------------------------

    /// Reverse-mode pass from a scalar node. Returns this pass's parameter
    /// gradients and adds them to the graph's running accumulator.
    pub fn backward(&mut self, output: NodeId) -> Result<BTreeMap<String, Tensor<F>>> {
        if self.stale {
            return Err(Error::Graph(
                "backward called before forward on modified graph".into(),
            ));
        }
        let out = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Graph(format!("no node {}", output.0)))?;
        if out.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, node {} has shape {:?}",
                output.0,
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out.value.shape(), F::one()));
        for index in (0..=output.0).rev() {
            let Some(dy) = grads[index].take() else {
                continue;
            };
            let node = &self.nodes[index];
            if node.op.is_leaf() {
                grads[index] = Some(dy);
                continue;
            }
            let args: Vec<&Tensor<F>> =
                node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let dxs = vjp(&node.op, &args, &node.value, &dy);
            for (input, dx) in node.inputs.iter().zip(dxs) {
                let Some(dx) = dx else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&dx),
                    slot @ None => *slot = Some(dx),
                }
            }
            grads[index] = None;
        }
        let mut result = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = grads
                .get_mut(id.0)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()));
            match self.grad_acc.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.grad_acc.insert(name.clone(), g.clone());
                }
            }
            result.insert(name.clone(), g);
        }
        Ok(result)
    }

    pub fn accumulated_grads(&self) -> &BTreeMap<String, Tensor<F>> {
        &self.grad_acc
    }

    pub fn zero_grad(&mut self) {
        self.grad_acc.clear();
    }

    // ---- operation builders ---------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { ta: false, tb: false }, vec![a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { ta: false, tb: true }, vec![a, b])
    }

    /// `a^T * b`
    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { ta: true, tb: false }, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow, vec![x, bias])
    }

    pub fn mul_row(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        self.push(Op::MulRow, vec![x, gain])
    }

    pub fn mul_col(&mut self, x: NodeId, scale: NodeId) -> Result<NodeId> {
        self.push(Op::MulCol, vec![x, scale])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(factor), vec![x])
    }

    pub fn shift(&mut self, x: NodeId, offset: f64) -> Result<NodeId> {
        self.push(Op::Shift(offset), vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![x])
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Abs, vec![x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Square, vec![x])
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(None), vec![x])
    }

    /// Row softmax restricted to entries where `allowed` is true.
    pub fn masked_softmax(&mut self, x: NodeId, allowed: Arc<Vec<bool>>) -> Result<NodeId> {
        self.push(Op::Softmax(Some(allowed)), vec![x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![x])
    }

    pub fn normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::NormalizeRows, vec![x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm { eps: 1e-5 }, vec![x, gain, bias])
    }

    /// "Same"-padded non-causal 1-D convolution over rows. `weight` is
    /// `[kernel * c_in, c_out]` with kernel taps as the outer block.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        kernel: usize,
        dilation: usize,
    ) -> Result<NodeId> {
        self.push(Op::Conv1d { kernel, dilation }, vec![x, weight, bias])
    }

    pub fn gather_rows(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        self.push(Op::GatherRows(Arc::new(index)), vec![x])
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols, parts.to_vec())
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::SliceCols { start, end }, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![x])
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::RowSum, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.push(Op::Reshape(shape), vec![x])
    }
}

impl Graph<f32> {
    /// Parameter leaf populated from a store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::Graph(format!("parameter {name} not initialized")))?;
        Ok(self.param_value(name, value))
    }
}

// ---- kernels --------------------------------------------------------------

fn expect_2d<F: Scalar>(node: usize, op: &Op, t: &Tensor<F>) -> Result<(usize, usize)> {
    if t.shape().is_empty() {
        return Err(shape_err(node, op, &[0, 0], t.shape()));
    }
    Ok((t.rows(), t.cols()))
}

fn same_shape<F: Scalar>(node: usize, op: &Op, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(node, op, a.shape(), b.shape()));
    }
    Ok(())
}

fn unary<F: Scalar>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    x.map(f)
}

fn zip<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn im2col<F: Scalar>(x: &Tensor<F>, kernel: usize, dilation: usize) -> Vec<F> {
    let (t_len, c_in) = (x.rows(), x.cols());
    let pad = dilation * (kernel - 1) / 2;
    let width = kernel * c_in;
    let mut col = vec![F::zero(); t_len * width];
    for t in 0..t_len {
        for k in 0..kernel {
            let src = t as isize + (k * dilation) as isize - pad as isize;
            if src < 0 || src >= t_len as isize {
                continue;
            }
            let src = src as usize;
            col[t * width + k * c_in..t * width + (k + 1) * c_in]
                .copy_from_slice(x.row(src));
        }
    }
    col
}

fn eval<F: Scalar>(node: usize, op: &Op, args: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let arity = match op {
        Op::Input | Op::Param | Op::Const => 0,
        Op::MatMul { .. }
        | Op::Add
        | Op::Sub
        | Op::Mul
        | Op::AddRow
        | Op::MulRow
        | Op::MulCol => 2,
        Op::LayerNorm { .. } | Op::Conv1d { .. } => 3,
        Op::ConcatCols => args.len().max(1),
        _ => 1,
    };
    if args.len() != arity {
        return Err(Error::Graph(format!(
            "node {node} ({}) takes {arity} inputs, got {}",
            op.name(),
            args.len()
        )));
    }
    let out = match op {
        Op::Input | Op::Param | Op::Const => unreachable!("leaves are not evaluated"),
        Op::MatMul { ta, tb } => {
            let (ar, ac) = expect_2d(node, op, args[0])?;
            let (br, bc) = expect_2d(node, op, args[1])?;
            let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if *tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(shape_err(node, op, &[k, n], &[k2, n]));
            }
            let mut out = Tensor::zeros(&[m, n]);
            F::gemm(
                m,
                k,
                n,
                F::one(),
                args[0].data(),
                *ta,
                args[1].data(),
                *tb,
                F::zero(),
                out.data_mut(),
            );
            out
        }
        Op::Add => {
            same_shape(node, op, args[0], args[1])?;
            zip(args[0], args[1], |a, b| a + b)
        }
        Op::Sub => {
            same_shape(node, op, args[0], args[1])?;
            zip(args[0], args[1], |a, b| a - b)
        }
        Op::Mul => {
            same_shape(node, op, args[0], args[1])?;
            zip(args[0], args[1], |a, b| a * b)
        }
        Op::AddRow | Op::MulRow => {
            let (_, n) = expect_2d(node, op, args[0])?;
            if args[1].numel() != n {
                return Err(shape_err(node, op, &[n], args[1].shape()));
            }
            let b = args[1].data();
            let mut out = args[0].clone();
            for row in out.data_mut().chunks_mut(n) {
                for (v, &bj) in row.iter_mut().zip(b) {
                    *v = if matches!(op, Op::AddRow) { *v + bj } else { *v * bj };
                }
            }
            out
        }
        Op::MulCol => {
            let (m, n) = expect_2d(node, op, args[0])?;
            if args[1].numel() != m {
                return Err(shape_err(node, op, &[m, 1], args[1].shape()));
            }
            let s = args[1].data();
            let mut out = args[0].clone();
            for (row, &si) in out.data_mut().chunks_mut(n).zip(s) {
                for v in row {
                    *v = *v * si;
                }
            }
            out
        }
        Op::Scale(c) => {
            let c = F::from_f64(*c);
            unary(args[0], |v| v * c)
        }
        Op::Shift(c) => {
            let c = F::from_f64(*c);
            unary(args[0], |v| v + c)
        }
        Op::Relu => unary(args[0], |v| if v > F::zero() { v } else { F::zero() }),
        Op::Tanh => unary(args[0], |v| v.tanh()),
        Op::Sigmoid => unary(args[0], sigmoid),
        Op::Log => unary(args[0], |v| v.ln()),
        Op::Abs => unary(args[0], |v| v.abs()),
        Op::Square => unary(args[0], |v| v * v),
        Op::Softmax(mask) => {
            let (m, n) = expect_2d(node, op, args[0])?;
            if let Some(mask) = mask {
                if mask.len() != m * n {
                    return Err(shape_err(node, op, &[m, n], &[mask.len()]));
                }
            }
            let mut out = Tensor::zeros(&[m, n]);
            for r in 0..m {
                let x = args[0].row(r);
                let allowed = |j: usize| mask.as_ref().is_none_or(|mk| mk[r * n + j]);
                let mut max = F::neg_infinity();
                for (j, &v) in x.iter().enumerate() {
                    if allowed(j) && v > max {
                        max = v;
                    }
                }
                if max == F::neg_infinity() {
                    return Err(Error::Graph(format!(
                        "node {node} (softmax): row {r} is fully masked"
                    )));
                }
                let row = &mut out.data_mut()[r * n..(r + 1) * n];
                let mut total = F::zero();
                for j in 0..n {
                    if allowed(j) {
                        row[j] = (x[j] - max).exp();
                        total = total + row[j];
                    }
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            out.reshape(args[0].shape().to_vec())?
        }
        Op::LogSoftmax => {
            let (m, n) = expect_2d(node, op, args[0])?;
            let mut out = args[0].clone();
            for r in 0..m {
                let row = &mut out.data_mut()[r * n..(r + 1) * n];
                let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
                let lse = row.iter().fold(F::zero(), |a, &b| a + (b - max).exp()).ln() + max;
                for v in row.iter_mut() {
                    *v = *v - lse;
                }
            }
            out
        }
        Op::NormalizeRows => {
            let (m, n) = expect_2d(node, op, args[0])?;
            let mut out = args[0].clone();
            for r in 0..m {
                let row = &mut out.data_mut()[r * n..(r + 1) * n];
                let total = row.iter().fold(F::zero(), |a, &b| a + b);
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
            out
        }
        Op::LayerNorm { eps } => {
            let (m, n) = expect_2d(node, op, args[0])?;
            if args[1].numel() != n || args[2].numel() != n {
                return Err(shape_err(node, op, &[n], args[1].shape()));
            }
            let eps = F::from_f64(*eps);
            let nf = F::from_f64(n as f64);
            let (g, b) = (args[1].data(), args[2].data());
            let mut out = args[0].clone();
            for r in 0..m {
                let row = &mut out.data_mut()[r * n..(r + 1) * n];
                let mean = row.iter().fold(F::zero(), |a, &v| a + v) / nf;
                let var = row
                    .iter()
                    .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / nf;
                let inv = F::one() / (var + eps).sqrt();
                for j in 0..n {
                    row[j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
            out
        }
        Op::Conv1d { kernel, dilation } => {
            let (t_len, c_in) = expect_2d(node, op, args[0])?;
            if kernel % 2 == 0 {
                return Err(Error::Graph(format!(
                    "node {node} (conv1d): kernel {kernel} must be odd for same padding"
                )));
            }
            let (wr, c_out) = expect_2d(node, op, args[1])?;
            if wr != kernel * c_in {
                return Err(shape_err(node, op, &[kernel * c_in, c_out], args[1].shape()));
            }
            if args[2].numel() != c_out {
                return Err(shape_err(node, op, &[c_out], args[2].shape()));
            }
            let col = im2col(args[0], *kernel, *dilation);
            let mut out = Tensor::zeros(&[t_len, c_out]);
            for row in out.data_mut().chunks_mut(c_out) {
                row.copy_from_slice(args[2].data());
            }
            F::gemm(
                t_len,
                kernel * c_in,
                c_out,
                F::one(),
                &col,
                false,
                args[1].data(),
                false,
                F::one(),
                out.data_mut(),
            );
            out
        }
        Op::GatherRows(index) => {
            let (m, n) = expect_2d(node, op, args[0])?;
            let mut data = Vec::with_capacity(index.len() * n);
            for &i in index.iter() {
                if i >= m {
                    return Err(Error::Graph(format!(
                        "node {node} (gather_rows): row {i} out of range for {m} rows"
                    )));
                }
                data.extend_from_slice(args[0].row(i));
            }
            Tensor::new(vec![index.len(), n], data)?
        }
        Op::ConcatCols => {
            let m = args[0].rows();
            for a in args {
                if a.rows() != m {
                    return Err(shape_err(node, op, &[m, a.cols()], a.shape()));
                }
            }
            let n: usize = args.iter().map(|a| a.cols()).sum();
            let mut data = Vec::with_capacity(m * n);
            for r in 0..m {
                for a in args {
                    data.extend_from_slice(a.row(r));
                }
            }
            Tensor::new(vec![m, n], data)?
        }
        Op::SliceCols { start, end } => {
            let (m, n) = expect_2d(node, op, args[0])?;
            if start >= end || *end > n {
                return Err(shape_err(node, op, &[m, end - start.min(end)], &[m, n]));
            }
            let mut data = Vec::with_capacity(m * (end - start));
            for r in 0..m {
                data.extend_from_slice(&args[0].row(r)[*start..*end]);
            }
            Tensor::new(vec![m, end - start], data)?
        }
        Op::Sum => Tensor::scalar(args[0].sum()),
        Op::Mean => {
            if args[0].numel() == 0 {
                return Err(Error::Graph(format!("node {node} (mean): empty tensor")));
            }
            Tensor::scalar(args[0].sum() / F::from_f64(args[0].numel() as f64))
        }
        Op::RowSum => {
            let (m, n) = expect_2d(node, op, args[0])?;
            let data = (0..m)
                .map(|r| args[0].data()[r * n..(r + 1) * n].iter().fold(F::zero(), |a, &b| a + b))
                .collect();
            Tensor::new(vec![m, 1], data)?
        }
        Op::Reshape(shape) => {
            let numel: usize = shape.iter().product();
            if numel != args[0].numel() {
                return Err(shape_err(node, op, shape, args[0].shape()));
            }
            args[0].clone().reshape(shape.clone())?
        }
    };
    Ok(out)
}

/// Vector-Jacobian products: gradient for each input given `dy`.
fn vjp<F: Scalar>(
    op: &Op,
    args: &[&Tensor<F>],
    y: &Tensor<F>,
    dy: &Tensor<F>,
) -> Vec<Option<Tensor<F>>> {
    let one = F::one();
    let zero = F::zero();
    match op {
        Op::Input | Op::Param | Op::Const => vec![],
        Op::MatMul { ta, tb } => {
            let (a, b) = (args[0], args[1]);
            let (m, n) = (y.rows(), y.cols());
            let k = if *ta { a.rows() } else { a.cols() };
            let mut da = Tensor::zeros(a.shape());
            let mut db = Tensor::zeros(b.shape());
            if *ta {
                // A is k x m: dA = op(B) dC^T
                F::gemm(k, n, m, one, b.data(), *tb, dy.data(), true, zero, da.data_mut());
            } else {
                // dA = dC op(B)^T
                F::gemm(m, n, k, one, dy.data(), false, b.data(), !*tb, zero, da.data_mut());
            }
            if *tb {
                // B is n x k: dB = dC^T op(A)
                F::gemm(n, m, k, one, dy.data(), true, a.data(), *ta, zero, db.data_mut());
            } else {
                // dB = op(A)^T dC
                F::gemm(k, m, n, one, a.data(), !*ta, dy.data(), false, zero, db.data_mut());
            }
            vec![Some(da), Some(db)]
        }
        Op::Add => vec![Some(dy.clone()), Some(dy.clone())],
        Op::Sub => vec![Some(dy.clone()), Some(dy.map(|v| -v))],
        Op::Mul => vec![
            Some(zip(dy, args[1], |d, b| d * b)),
            Some(zip(dy, args[0], |d, a| d * a)),
        ],
        Op::AddRow => {
            let n = y.cols();
            let mut db = Tensor::zeros(args[1].shape());
            for row in dy.data().chunks(n) {
                for (acc, &d) in db.data_mut().iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            vec![Some(dy.clone()), Some(db)]
        }
        Op::MulRow => {
            let n = y.cols();
            let g = args[1].data();
            let mut dx = dy.clone();
            let mut dg = Tensor::zeros(args[1].shape());
            for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                let xr = args[0].row(r);
                for j in 0..n {
                    dg.data_mut()[j] = dg.data()[j] + row[j] * xr[j];
                    row[j] = row[j] * g[j];
                }
            }
            vec![Some(dx), Some(dg)]
        }
        Op::MulCol => {
            let n = y.cols();
            let s = args[1].data();
            let mut dx = dy.clone();
            let mut ds = Tensor::zeros(args[1].shape());
            for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                let xr = args[0].row(r);
                let mut acc = zero;
                for j in 0..n {
                    acc = acc + row[j] * xr[j];
                    row[j] = row[j] * s[r];
                }
                ds.data_mut()[r] = acc;
            }
            vec![Some(dx), Some(ds)]
        }
        Op::Scale(c) => {
            let c = F::from_f64(*c);
            vec![Some(dy.map(|v| v * c))]
        }
        Op::Shift(_) => vec![Some(dy.clone())],
        Op::Relu => vec![Some(zip(dy, args[0], |d, x| if x > zero { d } else { zero }))],
        Op::Tanh => vec![Some(zip(dy, y, |d, t| d * (one - t * t)))],
        Op::Sigmoid => vec![Some(zip(dy, y, |d, s| d * s * (one - s)))],
        Op::Log => vec![Some(zip(dy, args[0], |d, x| d / x))],
        Op::Abs => vec![Some(zip(dy, args[0], |d, x| {
            if x > zero {
                d
            } else if x < zero {
                -d
            } else {
                zero
            }
        }))],
        Op::Square => vec![Some(zip(dy, args[0], |d, x| d * (x + x)))],
        Op::Softmax(_) => {
            let n = y.cols();
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let dr = dy.row(r);
                let dot = yr.iter().zip(dr).fold(zero, |a, (&p, &d)| a + p * d);
                let out = &mut dx.data_mut()[r * n..(r + 1) * n];
                for j in 0..n {
                    out[j] = yr[j] * (dr[j] - dot);
                }
            }
            vec![Some(dx)]
        }
        Op::LogSoftmax => {
            let n = y.cols();
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let dr = dy.row(r);
                let total = dr.iter().fold(zero, |a, &d| a + d);
                let out = &mut dx.data_mut()[r * n..(r + 1) * n];
                for j in 0..n {
                    out[j] = dr[j] - yr[j].exp() * total;
                }
            }
            vec![Some(dx)]
        }
        Op::NormalizeRows => {
            let n = y.cols();
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..y.rows() {
                let xr = args[0].row(r);
                let yr = y.row(r);
                let dr = dy.row(r);
                let s = xr.iter().fold(zero, |a, &v| a + v);
                let dot = yr.iter().zip(dr).fold(zero, |a, (&p, &d)| a + p * d);
                let out = &mut dx.data_mut()[r * n..(r + 1) * n];
                for j in 0..n {
                    out[j] = (dr[j] - dot) / s;
                }
            }
            vec![Some(dx)]
        }
        Op::LayerNorm { eps } => {
            let (m, n) = (y.rows(), y.cols());
            let eps = F::from_f64(*eps);
            let nf = F::from_f64(n as f64);
            let g = args[1].data();
            let mut dx = Tensor::zeros(y.shape());
            let mut dg = Tensor::zeros(args[1].shape());
            let mut db = Tensor::zeros(args[2].shape());
            let mut xhat = vec![zero; n];
            let mut dxhat = vec![zero; n];
            for r in 0..m {
                let xr = args[0].row(r);
                let dr = dy.row(r);
                let mean = xr.iter().fold(zero, |a, &v| a + v) / nf;
                let var = xr.iter().fold(zero, |a, &v| a + (v - mean) * (v - mean)) / nf;
                let inv = one / (var + eps).sqrt();
                let mut mean_dxhat = zero;
                let mut mean_dxhat_xhat = zero;
                for j in 0..n {
                    xhat[j] = (xr[j] - mean) * inv;
                    dxhat[j] = dr[j] * g[j];
                    mean_dxhat = mean_dxhat + dxhat[j];
                    mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
                    dg.data_mut()[j] = dg.data()[j] + dr[j] * xhat[j];
                    db.data_mut()[j] = db.data()[j] + dr[j];
                }
                mean_dxhat = mean_dxhat / nf;
                mean_dxhat_xhat = mean_dxhat_xhat / nf;
                let out = &mut dx.data_mut()[r * n..(r + 1) * n];
                for j in 0..n {
                    out[j] = inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                }
            }
            vec![Some(dx), Some(dg), Some(db)]
        }
        Op::Conv1d { kernel, dilation } => {
            let x = args[0];
            let (t_len, c_in) = (x.rows(), x.cols());
            let c_out = y.cols();
            let width = kernel * c_in;
            let col = im2col(x, *kernel, *dilation);
            let mut dw = Tensor::zeros(args[1].shape());
            F::gemm(width, t_len, c_out, one, &col, true, dy.data(), false, zero, dw.data_mut());
            let mut db = Tensor::zeros(args[2].shape());
            for row in dy.data().chunks(c_out) {
                for (acc, &d) in db.data_mut().iter_mut().zip(row) {
                    *acc = *acc + d;
                }
            }
            let mut dcol = vec![zero; t_len * width];
            F::gemm(t_len, c_out, width, one, dy.data(), false, args[1].data(), true, zero, &mut dcol);
            let pad = dilation * (kernel - 1) / 2;
            let mut dx = Tensor::zeros(x.shape());
            for t in 0..t_len {
                for k in 0..*kernel {
                    let src = t as isize + (k * dilation) as isize - pad as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src = src as usize;
                    let from = &dcol[t * width + k * c_in..t * width + (k + 1) * c_in];
                    let to = &mut dx.data_mut()[src * c_in..(src + 1) * c_in];
                    for (a, &b) in to.iter_mut().zip(from) {
                        *a = *a + b;
                    }
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::GatherRows(index) => {
            let n = y.cols();
            let mut dx = Tensor::zeros(args[0].shape());
            for (r, &i) in index.iter().enumerate() {
                let from = dy.row(r);
                let to = &mut dx.data_mut()[i * n..(i + 1) * n];
                for (a, &b) in to.iter_mut().zip(from) {
                    *a = *a + b;
                }
            }
            vec![Some(dx)]
        }
        Op::ConcatCols => {
            let m = y.rows();
            let mut offset = 0;
            args.iter()
                .map(|a| {
                    let w = a.cols();
                    let mut data = Vec::with_capacity(m * w);
                    for r in 0..m {
                        data.extend_from_slice(&dy.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    Some(Tensor::new(a.shape().to_vec(), data).expect("same numel"))
                })
                .collect()
        }
        Op::SliceCols { start, end } => {
            let n = args[0].cols();
            let w = end - start;
            let mut dx = Tensor::zeros(args[0].shape());
            for r in 0..y.rows() {
                dx.data_mut()[r * n + start..r * n + end].copy_from_slice(&dy.data()[r * w..(r + 1) * w]);
            }
            vec![Some(dx)]
        }
        Op::Sum => vec![Some(Tensor::full(args[0].shape(), dy.item()))],
        Op::Mean => {
            let c = dy.item() / F::from_f64(args[0].numel() as f64);
            vec![Some(Tensor::full(args[0].shape(), c))]
        }
        Op::RowSum => {
            let n = args[0].cols();
            let mut dx = Tensor::zeros(args[0].shape());
            for (r, row) in dx.data_mut().chunks_mut(n).enumerate() {
                row.fill(dy.data()[r]);
            }
            vec![Some(dx)]
        }
        Op::Reshape(_) => vec![Some(
            dy.clone()
                .reshape(args[0].shape().to_vec())
                .expect("same numel"),
        )],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negative() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn layer_norm_uses_population_variance() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let bias = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        // (x - 2) / sqrt(1 + 1e-5)
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5, "{v:?}");
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param_value("w", &t(&[1], &[3.0]));
        let y = g.square(w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["w"].data(), &[6.0]);
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param_value("w", &t(&[1], &[1.0]));
        let neg = g.scale(w, -1.0).unwrap();
        let y = g.relu(neg).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["w"].data(), &[0.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let w = g.param_value("w", &t(&[1], &[3.0]));
        let y = g.square(w).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.accumulated_grads()["w"].data(), &[12.0]);
        g.zero_grad();
        assert!(g.accumulated_grads().is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar_and_stale_graphs() {
        let mut g = Graph::new();
        let w = g.param_value("w", &t(&[2], &[1.0, 2.0]));
        let y = g.square(w).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Graph(_))));
        let s = g.sum(y).unwrap();
        g.set_param("w", t(&[2], &[0.5, 0.5])).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Graph(_))));
        g.forward(&BTreeMap::new()).unwrap();
        assert_eq!(g.scalar(s), 0.5);
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn shape_errors_name_the_node() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[0.0; 6]));
        let b = g.constant(t(&[2, 3], &[0.0; 6]));
        match g.matmul(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[-1.0]));
        match g.log(x) {
            Err(Error::NonFinite { node, op }) => assert_eq!((node, op), (1, "log")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn forward_replays_with_new_inputs() {
        let mut g = Graph::new();
        let x = g.input("x", t(&[1, 2], &[1.0, 2.0]));
        let y = g.square(x).unwrap();
        let s = g.sum(y).unwrap();
        g.mark_output("s", s);
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), t(&[1, 2], &[3.0, 4.0]));
        let out = g.forward(&inputs).unwrap();
        assert_eq!(out["s"].item(), 25.0);
        inputs.insert("x".to_string(), t(&[2, 1], &[3.0, 4.0]));
        assert!(matches!(g.forward(&inputs), Err(Error::Shape { .. })));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]));
        let mask = Arc::new(vec![true, true, false, false, false, true]);
        let y = g.masked_softmax(x, mask).unwrap();
        let v = g.value(y);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 2), 1.0);
        assert!((v.get(0, 0) + v.get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn conv1d_same_padding_keeps_length() {
        let mut g = Graph::new();
        let x = g.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
        // kernel [1, 1, 1] summing neighbours
        let w = g.constant(t(&[3, 1], &[1.0, 1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv1d(x, w, b, 3, 1).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 9.0, 7.0]);
        let y2 = g.conv1d(x, w, b, 3, 2).unwrap();
        assert_eq!(g.value(y2).data(), &[4.0, 6.0, 4.0, 6.0]);
    }
}
