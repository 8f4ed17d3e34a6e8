//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of operation records. Forward calls append nodes and
//! store the values needed for the backward sweep; [`Graph::backward`] walks
//! the tape once in reverse and returns a gradient per node. Tensors are
//! lightweight handles into the tape.
//!
//! The primitive set is intentionally small: matmul, the broadcasting
//! elementwise ops, a handful of pointwise nonlinearities, full reductions,
//! an explicit broadcast, and a stop-gradient marker (identity forward, zero
//! backward). Everything else in the crate is composed from these.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static GRAPH_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Floor applied to `log` inputs so collapsed variances cannot produce NaN.
pub const LOG_FLOOR: f64 = 1e-12;

pub type NodeId = usize;

/// Handle to a node on a [`Graph`]. Cheap to copy; values and gradients are
/// read back through the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    graph: u64,
    node: NodeId,
}

impl Tensor {
    pub fn node_id(&self) -> NodeId {
        self.node
    }
}

/// A named parameter array living outside any graph. Models own these; each
/// loss evaluation copies them onto a fresh graph as leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let p = Param {
            name: name.into(),
            shape,
            values,
        };
        debug_assert_eq!(numel(&p.shape), p.values.len());
        p
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Param::new(name, shape, vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Primitive operation kinds, the dispatch surface for [`Graph::forward_op`].
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    Exp,
    Log,
    Tanh,
    Relu,
    Square,
    Sum,
    Mean,
    Broadcast { target: Vec<usize> },
    StopGrad,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Square => "square",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::StopGrad => "stop_grad",
        }
    }
}

/// How a binary elementwise op aligns its two operands.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Spread {
    Same,
    LeftScalar,
    RightScalar,
    /// Left operand is a row vector broadcast down the rows of the right.
    LeftRow,
    RightRow,
    /// Left operand is a column vector broadcast across the columns of the right.
    LeftCol,
    RightCol,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
        spread: Spread,
    },
    Sub {
        a: NodeId,
        b: NodeId,
        spread: Spread,
    },
    Mul {
        a: NodeId,
        b: NodeId,
        spread: Spread,
    },
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Broadcast(NodeId),
    StopGrad(NodeId),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`. Zero for nodes the loss does
    /// not reach.
    pub fn wrt(&self, t: Tensor) -> &[f64] {
        assert_eq!(
            t.graph, self.graph,
            "gradient lookup with a tensor from another graph"
        );
        &self.grads[t.node]
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// Row width of a 1-D `[c]` or 2-D `[1, c]` shape.
fn row_width(shape: &[usize]) -> Option<usize> {
    match shape {
        [c] => Some(*c),
        [1, c] => Some(*c),
        _ => None,
    }
}

fn check_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericOverflow { op: op.to_string() })
    }
}

/// Reverse-mode tape. Single-threaded per instance; distinct graphs are
/// independent.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
    /// When set, the k-th stop-gradient node emits these values instead of
    /// copying its input. The gradient checker uses this to hold detached
    /// branches constant while it perturbs parameters: stop-gradient defines
    /// its argument as a constant of the differentiation, so the
    /// finite-difference oracle must freeze it too.
    stop_grad_overrides: Option<Vec<Vec<f64>>>,
    stop_grads_seen: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            stop_grad_overrides: None,
            stop_grads_seen: 0,
        }
    }

    /// A graph whose stop-gradient nodes emit the given values (in creation
    /// order) instead of their inputs.
    pub fn with_stop_grad_overrides(overrides: Vec<Vec<f64>>) -> Self {
        let mut g = Self::new();
        g.stop_grad_overrides = Some(overrides);
        g
    }

    /// Outputs of every stop-gradient node, in creation order.
    pub fn stop_grad_values(&self) -> Vec<Vec<f64>> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::StopGrad(_)))
            .map(|n| n.values.clone())
            .collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Input node ids of a node's producing operation.
    pub fn inputs_of(&self, node: NodeId) -> Vec<NodeId> {
        match &self.nodes[node].op {
            Op::Leaf => vec![],
            Op::Matmul { a, b, .. }
            | Op::Add { a, b, .. }
            | Op::Sub { a, b, .. }
            | Op::Mul { a, b, .. } => vec![*a, *b],
            Op::Exp(x)
            | Op::Log(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Square(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Broadcast(x)
            | Op::StopGrad(x) => vec![*x],
        }
    }

    fn check(&self, t: Tensor) -> Result<()> {
        if t.graph != self.id {
            return Err(Error::GraphMismatch {
                expected: self.id,
                actual: t.graph,
            });
        }
        debug_assert!(t.node < self.nodes.len());
        Ok(())
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        debug_assert_eq!(numel(&shape), values.len());
        let node = self.nodes.len();
        self.nodes.push(Node { op, shape, values });
        Tensor {
            graph: self.id,
            node,
        }
    }

    /// Insert a data leaf. Values must be finite.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(Error::shape(
                "leaf",
                format!("shape {:?} wants {} values, got {}", shape, numel(shape), values.len()),
            ));
        }
        check_finite("leaf", &values)?;
        Ok(self.push(Op::Leaf, shape.to_vec(), values))
    }

    /// Scalar constant leaf.
    pub fn constant(&mut self, v: f64) -> Tensor {
        self.push(Op::Leaf, vec![1], vec![v])
    }

    /// Copy a parameter's current values onto the tape.
    pub fn leaf_param(&mut self, p: &Param) -> Result<Tensor> {
        self.leaf(&p.shape, p.values.clone())
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        assert_eq!(t.graph, self.id, "shape lookup with foreign tensor");
        &self.nodes[t.node].shape
    }

    pub fn values(&self, t: Tensor) -> &[f64] {
        assert_eq!(t.graph, self.id, "value lookup with foreign tensor");
        &self.nodes[t.node].values
    }

    /// Value of a scalar tensor.
    pub fn scalar(&self, t: Tensor) -> f64 {
        let v = self.values(t);
        assert_eq!(v.len(), 1, "scalar() on tensor with {} elements", v.len());
        v[0]
    }

    /// Generic dispatch over the primitive set; convenience methods below are
    /// thin wrappers around the same records.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Tensor]) -> Result<Tensor> {
        let want = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::shape(
                    kind.name(),
                    format!("expected {} inputs, got {}", n, inputs.len()),
                ))
            } else {
                Ok(())
            }
        };
        match &kind {
            OpKind::Matmul => {
                want(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                want(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Sub => {
                want(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                want(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Exp => {
                want(1)?;
                self.exp(inputs[0])
            }
            OpKind::Log => {
                want(1)?;
                self.log(inputs[0])
            }
            OpKind::Tanh => {
                want(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Relu => {
                want(1)?;
                self.relu(inputs[0])
            }
            OpKind::Square => {
                want(1)?;
                self.square(inputs[0])
            }
            OpKind::Sum => {
                want(1)?;
                self.sum(inputs[0])
            }
            OpKind::Mean => {
                want(1)?;
                self.mean(inputs[0])
            }
            OpKind::Broadcast { target } => {
                want(1)?;
                self.broadcast_to(inputs[0], &target.clone())
            }
            OpKind::StopGrad => {
                want(1)?;
                Ok(self.stop_grad(inputs[0]))
            }
        }
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ((m, ka), (kb, n)) = match (dims2(&sa), dims2(&sb)) {
            (Some(x), Some(y)) => (x, y),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("requires two 2-D tensors, got {:?} and {:?}", sa, sb),
                ))
            }
        };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", sa, sb),
            ));
        }
        let (av, bv) = (&self.nodes[a.node].values, &self.nodes[b.node].values);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..ka {
                let x = av[i * ka + p];
                if x == 0.0 {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (d, y) in dst.iter_mut().zip(row) {
                    *d += x * y;
                }
            }
        }
        check_finite("matmul", &out)?;
        Ok(self.push(
            Op::Matmul { a: a.node, b: b.node, m, k: ka, n },
            vec![m, n],
            out,
        ))
    }

    fn spread_of(&self, op: &str, a: Tensor, b: Tensor) -> Result<(Vec<usize>, Spread)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), Spread::Same));
        }
        if is_scalar(sa) {
            return Ok((sb.to_vec(), Spread::LeftScalar));
        }
        if is_scalar(sb) {
            return Ok((sa.to_vec(), Spread::RightScalar));
        }
        if let Some((r, c)) = dims2(sb) {
            if row_width(sa) == Some(c) {
                return Ok((sb.to_vec(), Spread::LeftRow));
            }
            if sa == [r, 1] {
                return Ok((sb.to_vec(), Spread::LeftCol));
            }
        }
        if let Some((r, c)) = dims2(sa) {
            if row_width(sb) == Some(c) {
                return Ok((sa.to_vec(), Spread::RightRow));
            }
            if sb == [r, 1] {
                return Ok((sa.to_vec(), Spread::RightCol));
            }
        }
        Err(Error::shape(
            op,
            format!("operands {:?} and {:?} are not broadcast-compatible", sa, sb),
        ))
    }

    fn binary(
        &mut self,
        op_name: &str,
        a: Tensor,
        b: Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId, Spread) -> Op,
    ) -> Result<Tensor> {
        self.check(a)?;
        self.check(b)?;
        let (out_shape, spread) = self.spread_of(op_name, a, b)?;
        let cols = match dims2(&out_shape) {
            Some((_, c)) => c,
            None => numel(&out_shape),
        };
        let av = &self.nodes[a.node].values;
        let bv = &self.nodes[b.node].values;
        let n = numel(&out_shape);
        let mut out = vec![0.0; n];
        for (idx, o) in out.iter_mut().enumerate() {
            let (ia, ib) = spread_indices(spread, idx, cols);
            *o = f(av[ia], bv[ib]);
        }
        check_finite(op_name, &out)?;
        Ok(self.push(make(a.node, b.node, spread), out_shape, out))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, |a, b, spread| Op::Add { a, b, spread })
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, |a, b, spread| Op::Sub { a, b, spread })
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary("mul", a, b, |x, y| x * y, |a, b, spread| Op::Mul { a, b, spread })
    }

    fn unary(
        &mut self,
        op_name: &str,
        x: Tensor,
        f: impl Fn(f64) -> f64,
        make: impl Fn(NodeId) -> Op,
    ) -> Result<Tensor> {
        self.check(x)?;
        let shape = self.nodes[x.node].shape.clone();
        let out: Vec<f64> = self.nodes[x.node].values.iter().map(|&v| f(v)).collect();
        check_finite(op_name, &out)?;
        Ok(self.push(make(x.node), shape, out))
    }

    pub fn exp(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("exp", x, f64::exp, Op::Exp)
    }

    /// Natural log with the input floored at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("log", x, |v| v.max(LOG_FLOOR).ln(), Op::Log)
    }

    pub fn tanh(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("tanh", x, f64::tanh, Op::Tanh)
    }

    /// Rectifier; the gradient at exactly zero is zero.
    pub fn relu(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("relu", x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    pub fn square(&mut self, x: Tensor) -> Result<Tensor> {
        self.unary("square", x, |v| v * v, Op::Square)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Tensor) -> Result<Tensor> {
        self.check(x)?;
        let total: f64 = self.nodes[x.node].values.iter().sum();
        check_finite("sum", &[total])?;
        Ok(self.push(Op::Sum(x.node), vec![1], vec![total]))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Tensor) -> Result<Tensor> {
        self.check(x)?;
        let n = self.nodes[x.node].values.len();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor".to_string()));
        }
        let total: f64 = self.nodes[x.node].values.iter().sum();
        let m = total / n as f64;
        check_finite("mean", &[m])?;
        Ok(self.push(Op::Mean(x.node), vec![1], vec![m]))
    }

    /// Expand a scalar, row vector `[c]`/`[1,c]`, or column `[r,1]` to a full
    /// `[r, c]` matrix.
    pub fn broadcast_to(&mut self, x: Tensor, target: &[usize]) -> Result<Tensor> {
        self.check(x)?;
        let (r, c) = dims2(target).ok_or_else(|| {
            Error::shape("broadcast", format!("target must be 2-D, got {:?}", target))
        })?;
        let sx = self.shape(x).to_vec();
        let ok = is_scalar(&sx) || row_width(&sx) == Some(c) || sx == [r, 1];
        if !ok {
            return Err(Error::shape(
                "broadcast",
                format!("cannot broadcast {:?} to {:?}", sx, target),
            ));
        }
        let xv = &self.nodes[x.node].values;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let src = if is_scalar(&sx) {
                    0
                } else if row_width(&sx) == Some(c) {
                    j
                } else {
                    i
                };
                out[i * c + j] = xv[src];
            }
        }
        Ok(self.push(Op::Broadcast(x.node), target.to_vec(), out))
    }

    /// Identity forward, zero backward.
    pub fn stop_grad(&mut self, x: Tensor) -> Tensor {
        assert_eq!(x.graph, self.id, "stop_grad with foreign tensor");
        let shape = self.nodes[x.node].shape.clone();
        let values = match &self.stop_grad_overrides {
            Some(ovr) => {
                let v = ovr
                    .get(self.stop_grads_seen)
                    .unwrap_or_else(|| panic!(
                        "stop-grad override {} requested but only {} were recorded",
                        self.stop_grads_seen,
                        ovr.len()
                    ))
                    .clone();
                assert_eq!(v.len(), self.nodes[x.node].values.len());
                v
            }
            None => self.nodes[x.node].values.clone(),
        };
        self.stop_grads_seen += 1;
        self.push(Op::StopGrad(x.node), shape, values)
    }

    /// Multiply by a scalar constant.
    pub fn scale(&mut self, x: Tensor, c: f64) -> Result<Tensor> {
        let k = self.constant(c);
        self.mul(x, k)
    }

    /// Elementwise clamp built from the primitive set; gradient is zero
    /// outside `[lo, hi]` and one inside.
    pub fn clamp(&mut self, x: Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        let lo_c = self.constant(lo);
        let hi_c = self.constant(hi);
        let above = self.sub(x, lo_c)?;
        let above = self.relu(above)?;
        let floored = self.add(lo_c, above)?;
        let below = self.sub(hi_c, floored)?;
        let below = self.relu(below)?;
        self.sub(hi_c, below)
    }

    /// Reverse sweep from a scalar loss. Consumes the graph's one allowed
    /// backward pass; gradients of nodes the loss does not reach are zero.
    pub fn backward(&mut self, loss: Tensor) -> Result<Gradients> {
        self.check(loss)?;
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let loss_shape = self.nodes[loss.node].shape.clone();
        if !is_scalar(&loss_shape) {
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        self.backward_done = true;

        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.values.len()])
            .collect();
        grads[loss.node][0] = 1.0;

        for id in (0..self.nodes.len()).rev() {
            if grads[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            // Split borrows: gradient of the current node is read while input
            // gradients are written.
            let g_out = std::mem::take(&mut grads[id]);
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b, m, k, n } => {
                    let av = &self.nodes[*a].values;
                    let bv = &self.nodes[*b].values;
                    {
                        let ga = &mut grads[*a];
                        for i in 0..*m {
                            for p in 0..*k {
                                let mut acc = 0.0;
                                for j in 0..*n {
                                    acc += g_out[i * n + j] * bv[p * n + j];
                                }
                                ga[i * k + p] += acc;
                            }
                        }
                    }
                    {
                        let gb = &mut grads[*b];
                        for p in 0..*k {
                            for j in 0..*n {
                                let mut acc = 0.0;
                                for i in 0..*m {
                                    acc += av[i * k + p] * g_out[i * n + j];
                                }
                                gb[p * n + j] += acc;
                            }
                        }
                    }
                }
                Op::Add { a, b, spread } => {
                    let cols = cols_of(&node.shape);
                    for (idx, &g) in g_out.iter().enumerate() {
                        let (ia, ib) = spread_indices(*spread, idx, cols);
                        grads[*a][ia] += g;
                        grads[*b][ib] += g;
                    }
                }
                Op::Sub { a, b, spread } => {
                    let cols = cols_of(&node.shape);
                    for (idx, &g) in g_out.iter().enumerate() {
                        let (ia, ib) = spread_indices(*spread, idx, cols);
                        grads[*a][ia] += g;
                        grads[*b][ib] -= g;
                    }
                }
                Op::Mul { a, b, spread } => {
                    let cols = cols_of(&node.shape);
                    {
                        let bv = &self.nodes[*b].values;
                        let ga = &mut grads[*a];
                        for (idx, &g) in g_out.iter().enumerate() {
                            let (ia, ib) = spread_indices(*spread, idx, cols);
                            ga[ia] += g * bv[ib];
                        }
                    }
                    {
                        let av = &self.nodes[*a].values;
                        let gb = &mut grads[*b];
                        for (idx, &g) in g_out.iter().enumerate() {
                            let (ia, ib) = spread_indices(*spread, idx, cols);
                            gb[ib] += g * av[ia];
                        }
                    }
                }
                Op::Exp(x) => {
                    let out = &node.values;
                    for (idx, &g) in g_out.iter().enumerate() {
                        grads[*x][idx] += g * out[idx];
                    }
                }
                Op::Log(x) => {
                    let xv = &self.nodes[*x].values;
                    for (idx, &g) in g_out.iter().enumerate() {
                        if xv[idx] > LOG_FLOOR {
                            grads[*x][idx] += g / xv[idx];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let out = &node.values;
                    for (idx, &g) in g_out.iter().enumerate() {
                        grads[*x][idx] += g * (1.0 - out[idx] * out[idx]);
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].values;
                    for (idx, &g) in g_out.iter().enumerate() {
                        if xv[idx] > 0.0 {
                            grads[*x][idx] += g;
                        }
                    }
                }
                Op::Square(x) => {
                    let xv = &self.nodes[*x].values;
                    for (idx, &g) in g_out.iter().enumerate() {
                        grads[*x][idx] += 2.0 * xv[idx] * g;
                    }
                }
                Op::Sum(x) => {
                    let g = g_out[0];
                    for gx in grads[*x].iter_mut() {
                        *gx += g;
                    }
                }
                Op::Mean(x) => {
                    let n = self.nodes[*x].values.len() as f64;
                    let g = g_out[0] / n;
                    for gx in grads[*x].iter_mut() {
                        *gx += g;
                    }
                }
                Op::Broadcast(x) => {
                    let (r, c) = dims2(&node.shape).expect("broadcast output is 2-D");
                    let sx = self.nodes[*x].shape.clone();
                    let gx = &mut grads[*x];
                    for i in 0..r {
                        for j in 0..c {
                            let src = if is_scalar(&sx) {
                                0
                            } else if row_width(&sx) == Some(c) {
                                j
                            } else {
                                i
                            };
                            gx[src] += g_out[i * c + j];
                        }
                    }
                }
                Op::StopGrad(_) => {}
            }
            grads[id] = g_out;
        }

        for (id, g) in grads.iter().enumerate() {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericOverflow {
                    op: format!("backward (node {})", id),
                });
            }
        }

        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }
}

fn cols_of(shape: &[usize]) -> usize {
    match dims2(shape) {
        Some((_, c)) => c,
        None => numel(shape),
    }
}

fn spread_indices(spread: Spread, idx: usize, cols: usize) -> (usize, usize) {
    match spread {
        Spread::Same => (idx, idx),
        Spread::LeftScalar => (0, idx),
        Spread::RightScalar => (idx, 0),
        Spread::LeftRow => (idx % cols, idx),
        Spread::RightRow => (idx, idx % cols),
        Spread::LeftCol => (idx / cols, idx),
        Spread::RightCol => (idx, idx / cols),
    }
}

/// Max relative disagreement between analytic gradients and central finite
/// differences, over every entry of every parameter.
///
/// The builder must be deterministic: any sampling noise it uses has to be
/// fixed up front. Two forward evaluations are compared to detect violations.
///
/// Stop-gradient nodes define their argument as a constant of the
/// differentiation, so the finite-difference evaluations freeze every
/// stop-gradient output at its unperturbed value.
pub fn check_gradients<F>(mut build: F, params: &mut [Param], step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidStep(step));
    }

    fn eval<F>(
        build: &mut F,
        params: &[Param],
        frozen: Option<&[Vec<f64>]>,
    ) -> Result<(Graph, Vec<Tensor>, Tensor)>
    where
        F: FnMut(&mut Graph, &[Tensor]) -> Result<Tensor>,
    {
        let mut g = match frozen {
            Some(f) => Graph::with_stop_grad_overrides(f.to_vec()),
            None => Graph::new(),
        };
        let leaves: Vec<Tensor> = params
            .iter()
            .map(|p| g.leaf_param(p))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &leaves)?;
        if !is_scalar(g.shape(loss)) {
            return Err(Error::NonScalarLoss {
                shape: g.shape(loss).to_vec(),
            });
        }
        Ok((g, leaves, loss))
    }

    let (mut g1, leaves, loss1) = eval(&mut build, params, None)?;
    let v1 = g1.scalar(loss1);
    let frozen = g1.stop_grad_values();
    let (g2, _, loss2) = eval(&mut build, params, None)?;
    let v2 = g2.scalar(loss2);
    if v1.to_bits() != v2.to_bits() {
        return Err(Error::NondeterministicBuilder {
            first: v1,
            second: v2,
        });
    }

    let grads = g1.backward(loss1)?;
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|t| grads.wrt(*t).to_vec()).collect();

    let mut max_rel: f64 = 0.0;
    for pi in 0..params.len() {
        for (vi, &ana) in analytic[pi].iter().enumerate() {
            let orig = params[pi].values[vi];

            params[pi].values[vi] = orig + step;
            let (gp, _, lp) = eval(&mut build, params, Some(&frozen))?;
            let f_plus = gp.scalar(lp);

            params[pi].values[vi] = orig - step;
            let (gm, _, lm) = eval(&mut build, params, Some(&frozen))?;
            let f_minus = gm.scalar(lm);

            params[pi].values[vi] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let rel = (ana - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 3], vec![1.0; 6]).unwrap();
        let b = g.leaf(&[3, 1], vec![1.0; 3]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.values(c), &[3.0, 3.0]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.leaf(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.values(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn exp_identity_case() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![0.0]).unwrap();
        let y = g.exp(x).unwrap();
        assert_eq!(g.values(y), &[1.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.leaf(&[2, 2], vec![0.0; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn overflow_is_reported() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![1e308]).unwrap();
        let err = g.exp(x).unwrap_err();
        assert!(matches!(err, Error::NumericOverflow { .. }));
    }

    #[test]
    fn grad_of_square_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![3.0]).unwrap();
        let y = g.square(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x), &[6.0]);
    }

    #[test]
    fn grad_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let c = g.constant(5.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.wrt(x), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![2.0]).unwrap();
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardAlreadyRun)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn forward_op_arity_checked() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0]).unwrap();
        let err = g.forward_op(OpKind::Add, &[x]).unwrap_err();
        assert!(err.to_string().contains("expected 2 inputs"));
        let err = g.forward_op(OpKind::Exp, &[x, x]).unwrap_err();
        assert!(err.to_string().contains("expected 1 inputs"));
    }

    #[test]
    fn foreign_tensor_rejected() {
        let mut g1 = Graph::new();
        let mut g2 = Graph::new();
        let x = g1.leaf(&[1], vec![1.0]).unwrap();
        let y = g2.leaf(&[1], vec![1.0]).unwrap();
        assert!(matches!(g2.add(x, y), Err(Error::GraphMismatch { .. })));
    }

    #[test]
    fn sum_of_linear_map_matches_finite_differences() {
        // loss = sum(W x) with fixed pseudo-random W, x.
        let mut params = vec![
            Param::new(
                "w",
                vec![3, 4],
                (0..12).map(|i| ((i * 7 + 3) % 11) as f64 * 0.13 - 0.6).collect(),
            ),
            Param::new(
                "x",
                vec![4, 2],
                (0..8).map(|i| ((i * 5 + 1) % 9) as f64 * 0.21 - 0.8).collect(),
            ),
        ];
        let max_rel = check_gradients(
            |g, leaves| {
                let wx = g.matmul(leaves[0], leaves[1])?;
                g.sum(wx)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-6, "max_rel = {max_rel}");
    }

    #[test]
    fn quadratic_check_is_exact_to_roundoff() {
        let mut params = vec![Param::new("w", vec![1], vec![0.7])];
        let max_rel = check_gradients(
            |g, leaves| {
                let sq = g.square(leaves[0])?;
                g.sum(sq)
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(max_rel < 1e-9, "max_rel = {max_rel}");
    }

    #[test]
    fn zero_step_rejected() {
        let mut params = vec![Param::new("w", vec![1], vec![0.7])];
        let err = check_gradients(|g, leaves| g.sum(leaves[0]), &mut params, 0.0).unwrap_err();
        assert!(matches!(err, Error::InvalidStep(_)));
    }

    #[test]
    fn nondeterministic_builder_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0_f64);
        let mut params = vec![Param::new("w", vec![1], vec![0.7])];
        let err = check_gradients(
            |g, leaves| {
                calls.set(calls.get() + 1.0);
                let c = g.constant(calls.get());
                let t = g.mul(leaves[0], c)?;
                g.sum(t)
            },
            &mut params,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NondeterministicBuilder { .. }));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of (a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let vals = vec![0.3, -1.2, 0.8];
        let (a, b) = (1.7, -0.4);

        let run = |mode: u8| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(&[3], vals.clone()).unwrap();
            let l1 = {
                let s = g.square(x).unwrap();
                g.sum(s).unwrap()
            };
            let l2 = {
                let t = g.tanh(x).unwrap();
                g.sum(t).unwrap()
            };
            let loss = match mode {
                0 => {
                    let l1s = g.scale(l1, a).unwrap();
                    let l2s = g.scale(l2, b).unwrap();
                    g.add(l1s, l2s).unwrap()
                }
                1 => l1,
                _ => l2,
            };
            let grads = g.backward(loss).unwrap();
            grads.wrt(x).to_vec()
        };

        let combined = run(0);
        let g1 = run(1);
        let g2 = run(2);
        for i in 0..3 {
            let expect = a * g1[i] + b * g2[i];
            assert!((combined[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(&[2, 2], vec![0.3, -0.7, 1.1, 0.01]).unwrap();
            let e = g.exp(x).unwrap();
            let t = g.tanh(e).unwrap();
            let s = g.sum(t).unwrap();
            g.scalar(s)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn stop_grad_blocks_backward() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![2.0]).unwrap();
        let sg = g.stop_grad(x);
        let y = g.square(sg).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x), &[0.0]);
        assert_eq!(g.values(sg), &[2.0]);
    }

    #[test]
    fn log_floor_prevents_nan() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![0.0, 1.0]).unwrap();
        let y = g.log(x).unwrap();
        assert!((g.values(y)[0] - LOG_FLOOR.ln()).abs() < 1e-12);
        assert_eq!(g.values(y)[1], 0.0);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x)[0], 0.0);
        assert_eq!(grads.wrt(x)[1], 1.0);
    }

    #[test]
    fn clamp_composition() {
        let mut g = Graph::new();
        let x = g.leaf(&[4], vec![-10.0, -1.0, 1.0, 10.0]).unwrap();
        let y = g.clamp(x, -7.0, 7.0).unwrap();
        assert_eq!(g.values(y), &[-7.0, -1.0, 1.0, 7.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn row_and_col_broadcast_binary_ops() {
        let mut g = Graph::new();
        let m = g.leaf(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let row = g.leaf(&[3], vec![10., 20., 30.]).unwrap();
        let col = g.leaf(&[2, 1], vec![100., 200.]).unwrap();
        let a = g.add(m, row).unwrap();
        assert_eq!(g.values(a), &[11., 22., 33., 14., 25., 36.]);
        let b = g.add(m, col).unwrap();
        assert_eq!(g.values(b), &[101., 102., 103., 204., 205., 206.]);

        // Gradient reduces over the broadcast axis.
        let both = g.add(a, b).unwrap();
        let s = g.sum(both).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(row), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(col), &[3.0, 3.0]);
        assert_eq!(grads.wrt(m), &[2.0; 6]);
    }

    #[test]
    fn tape_is_topologically_ordered() {
        let mut g = Graph::new();
        let x = g.leaf(&[2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let e = g.exp(x).unwrap();
        let sg = g.stop_grad(e);
        let m = g.mul(e, sg).unwrap();
        let _ = g.sum(m).unwrap();
        for id in 0..g.node_count() {
            for input in g.inputs_of(id) {
                assert!(input < id, "node {id} depends on later node {input}");
            }
        }
    }

    #[test]
    fn broadcast_op_expands_and_reduces() {
        let mut g = Graph::new();
        let col = g.leaf(&[2, 1], vec![3.0, 4.0]).unwrap();
        let b = g.broadcast_to(col, &[2, 3]).unwrap();
        assert_eq!(g.values(b), &[3., 3., 3., 4., 4., 4.]);
        let s = g.sum(b).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(col), &[3.0, 3.0]);
    }
}
