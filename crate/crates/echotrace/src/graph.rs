//! Computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order by the builder methods, each of
//! which validates its shape contract up front, so `forward` is a single
//! in-order sweep and `backward` a single reverse sweep. Wavelet nodes are
//! fixed transforms: they carry no parameters and propagate gradients to
//! their inputs through the exact adjoint of the analysis.
//!
//! Parameters live outside the graph in a [`ParamStore`] keyed by name and
//! are bound at forward time, so one graph can be reused across training
//! iterations and parameter updates never touch graph state.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::grid::{Grid, Shape};
use crate::loss;
use crate::ops;
use crate::scalar::Scalar;
use crate::wavelet::{self, FilterBank, WaveletKind};

/// Named parameter collection with a stable (insertion) order, which the
/// checkpoint format and optimizer slot layout rely on.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Grid<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, grid: Grid<T>) {
        self.entries.insert(name.into(), grid);
    }

    pub fn get(&self, name: &str) -> Option<&Grid<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Grid<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Grid<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Grid<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|g| g.shape().len()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Input { slot: usize },
    Param { name: String },
    /// inputs: [x, kernel, bias]
    Conv2d { pad: usize, stride: usize },
    /// inputs: [x, kernel]
    TConv2d { stride: usize },
    MaxPool2,
    Relu,
    Sigmoid,
    Concat,
    CropCenter,
    Add,
    /// Single-level approximation subband of a fixed wavelet analysis.
    DwtApprox { bank: FilterBank },
    /// Detail subbands (h, v, d) of a fixed analysis, stacked as channels.
    DwtDetails { bank: FilterBank },
    /// inputs: [activation, labels]; labels receive no gradient.
    /// Per-image class-balanced BCE, pixel-summed then batch-averaged.
    BalancedBce { lambda: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Shape,
}

pub struct Graph<T> {
    nodes: Vec<Node>,
    input_shapes: Vec<Shape>,
    values: Vec<Option<Grid<T>>>,
    pool_argmax: Vec<Option<Vec<u32>>>,
    executed: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            input_shapes: Vec::new(),
            values: Vec::new(),
            pool_argmax: Vec::new(),
            executed: false,
        }
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn input_count(&self) -> usize {
        self.input_shapes.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Shape) -> NodeId {
        self.nodes.push(Node { op, inputs, shape });
        self.values.push(None);
        self.pool_argmax.push(None);
        self.executed = false;
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, shape: Shape) -> NodeId {
        let slot = self.input_shapes.len();
        self.input_shapes.push(shape);
        self.push(Op::Input { slot }, vec![], shape)
    }

    pub fn param(&mut self, name: impl Into<String>, shape: Shape) -> NodeId {
        self.push(Op::Param { name: name.into() }, vec![], shape)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        pad: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let shape = ops::conv2d_out_shape(self.shape(x), self.shape(kernel), pad, stride)?;
        let want_bias = Shape::new(1, self.shape(kernel).batch, 1, 1);
        if self.shape(bias) != want_bias {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {} != {want_bias}", self.shape(bias)),
            ));
        }
        Ok(self.push(Op::Conv2d { pad, stride }, vec![x, kernel, bias], shape))
    }

    pub fn tconv2d(&mut self, x: NodeId, kernel: NodeId, stride: usize) -> Result<NodeId> {
        let shape = ops::tconv2d_out_shape(self.shape(x), self.shape(kernel), stride)?;
        Ok(self.push(Op::TConv2d { stride }, vec![x, kernel], shape))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x);
        if s.rows % 2 != 0 || s.cols % 2 != 0 {
            return Err(Error::shape(
                "maxpool2",
                format!("rows and cols must be even, got {}x{}", s.rows, s.cols),
            ));
        }
        let shape = Shape::new(s.batch, s.channels, s.rows / 2, s.cols / 2);
        Ok(self.push(Op::MaxPool2, vec![x], shape))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Relu, vec![x], shape)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x);
        self.push(Op::Sigmoid, vec![x], shape)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no parts given"));
        }
        let first = self.shape(parts[0]);
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.batch, s.rows, s.cols) != (first.batch, first.rows, first.cols) {
                return Err(Error::shape(
                    "concat",
                    format!("part shape {s} does not align with {first}"),
                ));
            }
            channels += s.channels;
        }
        let shape = Shape::new(first.batch, channels, first.rows, first.cols);
        Ok(self.push(Op::Concat, parts.to_vec(), shape))
    }

    pub fn crop_center(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let s = self.shape(x);
        if rows > s.rows || cols > s.cols {
            return Err(Error::shape(
                "crop_center",
                format!("target {rows}x{cols} exceeds input {}x{}", s.rows, s.cols),
            ));
        }
        let shape = Shape::new(s.batch, s.channels, rows, cols);
        Ok(self.push(Op::CropCenter, vec![x], shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", format!("shape {sa} != {sb}")));
        }
        Ok(self.push(Op::Add, vec![a, b], sa))
    }

    pub fn dwt_approx(&mut self, x: NodeId, kind: WaveletKind) -> Result<NodeId> {
        let s = self.shape(x);
        check_dwt_node("dwt_approx", s)?;
        let shape = Shape::new(s.batch, 1, s.rows / 2, s.cols / 2);
        let bank = FilterBank::new(kind);
        Ok(self.push(Op::DwtApprox { bank }, vec![x], shape))
    }

    pub fn dwt_details(&mut self, x: NodeId, kind: WaveletKind) -> Result<NodeId> {
        let s = self.shape(x);
        check_dwt_node("dwt_details", s)?;
        let shape = Shape::new(s.batch, 3, s.rows / 2, s.cols / 2);
        let bank = FilterBank::new(kind);
        Ok(self.push(Op::DwtDetails { bank }, vec![x], shape))
    }

    pub fn balanced_bce(&mut self, activation: NodeId, labels: NodeId, lambda: f64) -> Result<NodeId> {
        let (sa, sl) = (self.shape(activation), self.shape(labels));
        if sa != sl {
            return Err(Error::shape(
                "balanced_bce",
                format!("activation shape {sa} != labels shape {sl}"),
            ));
        }
        if sa.len() == 0 {
            return Err(Error::shape("balanced_bce", "empty grids"));
        }
        Ok(self.push(
            Op::BalancedBce { lambda },
            vec![activation, labels],
            Shape::scalar(),
        ))
    }

    /// Executes all nodes in order. `inputs` bind to `input` nodes in
    /// creation order; parameters are looked up by name.
    pub fn forward(&mut self, inputs: &[&Grid<T>], params: &ParamStore<T>) -> Result<()> {
        if inputs.len() != self.input_shapes.len() {
            return Err(Error::Graph(format!(
                "expected {} inputs, got {}",
                self.input_shapes.len(),
                inputs.len()
            )));
        }
        for (slot, (grid, &want)) in inputs.iter().zip(&self.input_shapes).enumerate() {
            if grid.shape() != want {
                return Err(Error::Graph(format!(
                    "input {slot} has shape {}, graph expects {want}",
                    grid.shape()
                )));
            }
        }
        for i in 0..self.nodes.len() {
            let node = self.nodes[i].clone();
            let value = match &node.op {
                Op::Input { slot } => inputs[*slot].clone(),
                Op::Param { name } => {
                    let grid = params.get(name).ok_or_else(|| {
                        Error::Graph(format!("parameter {name:?} missing from store"))
                    })?;
                    if grid.shape() != node.shape {
                        return Err(Error::Graph(format!(
                            "parameter {name:?} has shape {}, graph expects {}",
                            grid.shape(),
                            node.shape
                        )));
                    }
                    grid.clone()
                }
                Op::Conv2d { pad, stride } => ops::conv2d(
                    self.val(node.inputs[0]),
                    self.val(node.inputs[1]),
                    self.val(node.inputs[2]),
                    *pad,
                    *stride,
                )?,
                Op::TConv2d { stride } => {
                    ops::tconv2d(self.val(node.inputs[0]), self.val(node.inputs[1]), *stride)?
                }
                Op::MaxPool2 => {
                    let (out, argmax) = ops::maxpool2(self.val(node.inputs[0]))?;
                    self.pool_argmax[i] = Some(argmax);
                    out
                }
                Op::Relu => ops::relu(self.val(node.inputs[0])),
                Op::Sigmoid => ops::sigmoid(self.val(node.inputs[0])),
                Op::Concat => {
                    let parts: Vec<&Grid<T>> = node.inputs.iter().map(|&p| self.val(p)).collect();
                    ops::concat_channels(&parts)?
                }
                Op::CropCenter => ops::crop_center(
                    self.val(node.inputs[0]),
                    node.shape.rows,
                    node.shape.cols,
                )?,
                Op::Add => ops::add(self.val(node.inputs[0]), self.val(node.inputs[1]))?,
                Op::DwtApprox { bank } => {
                    wavelet::dwt2(self.val(node.inputs[0]), bank)?.approx
                }
                Op::DwtDetails { bank } => {
                    wavelet::dwt2_details(self.val(node.inputs[0]), bank)?
                }
                Op::BalancedBce { lambda } => {
                    let loss = batch_bce(
                        self.val(node.inputs[0]),
                        self.val(node.inputs[1]),
                        *lambda,
                    )?
                    .0;
                    Grid::scalar(loss)
                }
            };
            self.values[i] = Some(value);
        }
        self.executed = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Grid<T> {
        self.values[id.0].as_ref().expect("node evaluated before use")
    }

    /// Value of a node from the most recent forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Grid<T>> {
        if !self.executed {
            return Err(Error::Graph("no forward pass has been run".into()));
        }
        Ok(self.val(id))
    }

    /// Reverse sweep from a scalar node. Returns one gradient grid per
    /// parameter in `params` (zero for parameters the loss does not reach).
    pub fn backward(&self, loss: NodeId, params: &ParamStore<T>) -> Result<ParamStore<T>> {
        if !self.executed {
            return Err(Error::Graph("backward requires a completed forward pass".into()));
        }
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::Graph(format!(
                "backward seed must be a scalar node, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Grid<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Grid::scalar(T::one()));
        let mut out = ParamStore::new();
        for (name, grid) in params.iter() {
            out.insert(name, Grid::zeros(grid.shape()));
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input { .. } => {}
                Op::Param { name } => {
                    match out.get_mut(name) {
                        Some(acc) => acc.add_assign(&grad)?,
                        None => {
                            return Err(Error::Graph(format!(
                                "parameter {name:?} missing from store"
                            )))
                        }
                    }
                }
                Op::Conv2d { pad, stride } => {
                    let g = ops::conv2d_backward(
                        self.val(node.inputs[0]),
                        self.val(node.inputs[1]),
                        *pad,
                        *stride,
                        &grad,
                    )?;
                    accumulate(&mut grads, node.inputs[0], g.x)?;
                    accumulate(&mut grads, node.inputs[1], g.kernel)?;
                    accumulate(&mut grads, node.inputs[2], g.bias)?;
                }
                Op::TConv2d { stride } => {
                    let g = ops::tconv2d_backward(
                        self.val(node.inputs[0]),
                        self.val(node.inputs[1]),
                        *stride,
                        &grad,
                    )?;
                    accumulate(&mut grads, node.inputs[0], g.x)?;
                    accumulate(&mut grads, node.inputs[1], g.kernel)?;
                }
                Op::MaxPool2 => {
                    let argmax = self.pool_argmax[i].as_ref().expect("pool ran forward");
                    let g = ops::maxpool2_backward(
                        self.val(node.inputs[0]).shape(),
                        argmax,
                        &grad,
                    )?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Op::Relu => {
                    let g = ops::relu_backward(self.val(node.inputs[0]), &grad);
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Op::Sigmoid => {
                    let g = ops::sigmoid_backward(self.val(NodeId(i)), &grad);
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Op::Concat => {
                    let shapes: Vec<Shape> =
                        node.inputs.iter().map(|&p| self.shape(p)).collect();
                    let parts = ops::concat_backward(&shapes, &grad)?;
                    for (&p, g) in node.inputs.iter().zip(parts) {
                        accumulate(&mut grads, p, g)?;
                    }
                }
                Op::CropCenter => {
                    let g =
                        ops::crop_center_backward(self.val(node.inputs[0]).shape(), &grad)?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Op::Add => {
                    accumulate(&mut grads, node.inputs[0], grad.clone())?;
                    accumulate(&mut grads, node.inputs[1], grad)?;
                }
                Op::DwtApprox { bank } => {
                    let g = wavelet::dwt2_approx_adjoint(&grad, bank)?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Op::DwtDetails { bank } => {
                    let g = wavelet::dwt2_details_adjoint(&grad, bank)?;
                    accumulate(&mut grads, node.inputs[0], g)?;
                }
                Op::BalancedBce { lambda } => {
                    let (_, mut dact) = batch_bce(
                        self.val(node.inputs[0]),
                        self.val(node.inputs[1]),
                        *lambda,
                    )?;
                    let seed = grad.data()[0];
                    if seed != T::one() {
                        dact = dact.map(|v| v * seed);
                    }
                    accumulate(&mut grads, node.inputs[0], dact)?;
                }
            }
        }
        Ok(out)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_dwt_node(op: &'static str, s: Shape) -> Result<()> {
    if s.channels != 1 {
        return Err(Error::shape(
            op,
            format!("expected 1 channel, got {}", s.channels),
        ));
    }
    if s.rows % 2 != 0 || s.cols % 2 != 0 || s.rows < 2 || s.cols < 2 {
        return Err(Error::shape(
            op,
            format!("rows and cols must be even and >= 2, got {}x{}", s.rows, s.cols),
        ));
    }
    Ok(())
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Grid<T>>],
    id: NodeId,
    grad: Grid<T>,
) -> Result<()> {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&grad)?,
        slot @ None => *slot = Some(grad),
    }
    Ok(())
}

/// Class-balanced BCE over a batch: per-image balance and pixel sum, then
/// mean over batch items. Returns the loss and its gradient w.r.t. the
/// activations.
fn batch_bce<T: Scalar>(
    activation: &Grid<T>,
    labels: &Grid<T>,
    lambda: f64,
) -> Result<(T, Grid<T>)> {
    let s = activation.shape();
    let mut total = T::zero();
    let mut grad = Grid::zeros(s);
    let inv_batch = T::from_f64(1.0 / s.batch as f64);
    for b in 0..s.batch {
        let bal = loss::class_balance_of_planes(labels, b, lambda)?;
        for c in 0..s.channels {
            let act = activation.plane(b, c);
            let lab = labels.plane(b, c);
            let gp = grad.plane_mut(b, c);
            for ((&x, &y), g) in act.iter().zip(lab).zip(gp.iter_mut()) {
                let (l, d) = loss::bce_term(x, y, &bal)?;
                total += l * inv_batch;
                *g = d * inv_batch;
            }
        }
    }
    Ok((total, grad))
}
