use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{NumError, Tensor};

/// Index of a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations. Binary elementwise ops accept equal shapes, a
/// single-element operand, or a vector matching the last axis of the other
/// operand (row broadcast).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    Input(String),
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Softmax over the last axis.
    Softmax(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    ClampMin(NodeId, f64),
    Sum(NodeId),
    /// Sum of a matrix over `axis` (0 collapses rows, 1 collapses columns).
    SumAxis(NodeId, usize),
    Mean(NodeId),
    Transpose(NodeId),
    /// `out.flat[i] = input.flat[indices[i]]`.
    Gather {
        input: NodeId,
        indices: Vec<usize>,
        shape: Vec<usize>,
    },
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::Mean(_) => "mean",
            Op::Transpose(_) => "transpose",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::ClampMin(a, _)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Mean(a)
            | Op::Transpose(a)
            | Op::Reshape(a, _) => vec![*a],
            Op::Gather { input, .. } => vec![*input],
        }
    }
}

/// Input bindings for [`Graph::evaluate`] and [`Graph::gradients`].
pub type Bindings = HashMap<String, Tensor>;

/// Output value, probed node values and input gradients.
pub type ProbedGradients = (f64, Vec<Tensor>, BTreeMap<String, Tensor>);

/// An append-only computation graph. Nodes can only reference earlier nodes,
/// so construction order is a topological order and the graph is acyclic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    nodes: Vec<Op>,
    output: Option<NodeId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    RhsScalar,
    LhsScalar,
    RhsRow,
    LhsRow,
}

fn broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Some(Broadcast::Same)
    } else if nb == 1 {
        Some(Broadcast::RhsScalar)
    } else if na == 1 {
        Some(Broadcast::LhsScalar)
    } else if b.len() == 1 && a.len() >= 2 && a[a.len() - 1] == b[0] {
        Some(Broadcast::RhsRow)
    } else if a.len() == 1 && b.len() >= 2 && b[b.len() - 1] == a[0] {
        Some(Broadcast::LhsRow)
    } else {
        None
    }
}

/// Applies `f` elementwise under the broadcast rule; returns the output shape
/// and values.
fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    mode: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> (Vec<usize>, Vec<f64>) {
    let (av, bv) = (a.values(), b.values());
    match mode {
        Broadcast::Same => (
            a.shape().to_vec(),
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::RhsScalar => (a.shape().to_vec(), av.iter().map(|&x| f(x, bv[0])).collect()),
        Broadcast::LhsScalar => (b.shape().to_vec(), bv.iter().map(|&y| f(av[0], y)).collect()),
        Broadcast::RhsRow => {
            let c = bv.len();
            (
                a.shape().to_vec(),
                av.iter().enumerate().map(|(i, &x)| f(x, bv[i % c])).collect(),
            )
        }
        Broadcast::LhsRow => {
            let c = av.len();
            (
                b.shape().to_vec(),
                bv.iter().enumerate().map(|(i, &y)| f(av[i % c], y)).collect(),
            )
        }
    }
}

/// Reduces an output-shaped gradient back onto an operand that was broadcast.
fn reduce_to(grad: &[f64], operand_len: usize, broadcasted: bool) -> Vec<f64> {
    if !broadcasted {
        return grad.to_vec();
    }
    let mut out = vec![0.0; operand_len];
    for (i, g) in grad.iter().enumerate() {
        out[i % operand_len] += g;
    }
    out
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn transpose(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = v[i * cols + j];
        }
    }
    out
}

fn softmax_rows(v: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (src, dst) in v.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for operand in op.operands() {
            assert!(operand.0 < self.nodes.len(), "operand refers to a later node");
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Named input. Requesting the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(pos) = self
            .nodes
            .iter()
            .position(|op| matches!(op, Op::Input(n) if n == name))
        {
            return NodeId(pos);
        }
        self.push(Op::Input(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sqrt(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        self.push(Op::ClampMin(a, floor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        self.push(Op::SumAxis(a, axis))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn gather(&mut self, input: NodeId, indices: Vec<usize>, shape: Vec<usize>) -> NodeId {
        self.push(Op::Gather {
            input,
            indices,
            shape,
        })
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    pub fn set_output(&mut self, node: NodeId) {
        assert!(node.0 < self.nodes.len());
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0]
    }

    /// Names of all input nodes, in construction order.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|op| match op {
                Op::Input(n) => Some(n.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Evaluates the designated output node.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Tensor, NumError> {
        let out = self.output.ok_or(NumError::NoOutput)?;
        let mut values = self.forward(bindings, out)?;
        Ok(values.swap_remove(out.0))
    }

    /// Evaluates an arbitrary node (forward pass up to and including it).
    pub fn evaluate_node(&self, bindings: &Bindings, node: NodeId) -> Result<Tensor, NumError> {
        let mut values = self.forward(bindings, node)?;
        Ok(values.swap_remove(node.0))
    }

    /// Evaluates several nodes in a single forward pass.
    pub fn evaluate_nodes(
        &self,
        bindings: &Bindings,
        nodes: &[NodeId],
    ) -> Result<Vec<Tensor>, NumError> {
        let Some(last) = nodes.iter().max() else {
            return Ok(vec![]);
        };
        let values = self.forward(bindings, *last)?;
        Ok(nodes.iter().map(|n| values[n.0].clone()).collect())
    }

    /// Reverse-mode gradients of the scalar output with respect to the
    /// requested inputs. Inputs the output does not depend on get zeros.
    pub fn gradients(
        &self,
        bindings: &Bindings,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>, NumError> {
        let (value, grads) = self.value_and_gradients(bindings, wrt)?;
        let _ = value;
        Ok(grads)
    }

    /// Output value together with [`Graph::gradients`].
    pub fn value_and_gradients(
        &self,
        bindings: &Bindings,
        wrt: &[&str],
    ) -> Result<(f64, BTreeMap<String, Tensor>), NumError> {
        let (value, _, grads) = self.probe_and_gradients(bindings, wrt, &[])?;
        Ok((value, grads))
    }

    /// [`Graph::value_and_gradients`] plus the values of `probes`, all from
    /// one forward pass.
    pub fn probe_and_gradients(
        &self,
        bindings: &Bindings,
        wrt: &[&str],
        probes: &[NodeId],
    ) -> Result<ProbedGradients, NumError> {
        let out = self.output.ok_or(NumError::NoOutput)?;
        let mut wanted = BTreeMap::new();
        for name in wrt {
            let pos = self
                .nodes
                .iter()
                .position(|op| matches!(op, Op::Input(n) if n == name))
                .ok_or_else(|| NumError::UnknownInput(name.to_string()))?;
            wanted.insert(name.to_string(), pos);
        }
        let last = probes
            .iter()
            .copied()
            .chain(wanted.values().map(|&p| NodeId(p)))
            .fold(out, NodeId::max);
        let values = self.forward(bindings, last)?;
        let output = &values[out.0];
        let value = output
            .item()
            .ok_or_else(|| NumError::NonScalarOutput(output.shape().to_vec()))?;
        let adjoints = self.backward(&values, out)?;
        let grads = wanted
            .into_iter()
            .map(|(name, pos)| {
                let g = adjoints
                    .get(pos)
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Tensor::zeros(values[pos].shape()));
                (name, g)
            })
            .collect();
        let probed = probes.iter().map(|p| values[p.0].clone()).collect();
        Ok((value, probed, grads))
    }

    fn forward(&self, bindings: &Bindings, last: NodeId) -> Result<Vec<Tensor>, NumError> {
        let mut values: Vec<Tensor> = Vec::with_capacity(last.0 + 1);
        for (idx, op) in self.nodes[..=last.0].iter().enumerate() {
            let value = self.eval_op(idx, op, &values, bindings)?;
            if value.values().iter().any(|v| !v.is_finite()) {
                return Err(NumError::NonFinite {
                    node: idx,
                    op: op.name(),
                });
            }
            values.push(value);
        }
        Ok(values)
    }

    fn eval_op(
        &self,
        idx: usize,
        op: &Op,
        values: &[Tensor],
        bindings: &Bindings,
    ) -> Result<Tensor, NumError> {
        let mismatch = |detail: String| NumError::ShapeMismatch {
            node: idx,
            op: op.name(),
            detail,
        };
        let v = |n: &NodeId| &values[n.0];
        Ok(match op {
            Op::Input(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| NumError::UnboundInput(name.clone()))?,
            Op::Constant(t) => t.clone(),
            Op::MatMul(a, b) => {
                let (a, b) = (v(a), v(b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Tensor::from_parts(vec![m, n], matmul(a.values(), b.values(), m, k, n))
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (v(a), v(b));
                let mode = broadcast(a.shape(), b.shape())
                    .ok_or_else(|| mismatch(format!("{:?} vs {:?}", a.shape(), b.shape())))?;
                let (shape, out) = match op {
                    Op::Add(..) => zip_broadcast(a, b, mode, |x, y| x + y),
                    Op::Sub(..) => zip_broadcast(a, b, mode, |x, y| x - y),
                    _ => zip_broadcast(a, b, mode, |x, y| x * y),
                };
                Tensor::from_parts(shape, out)
            }
            Op::Scale(a, s) => map(v(a), |x| x * s),
            Op::Relu(a) => map(v(a), |x| x.max(0.0)),
            Op::Softmax(a) => {
                let a = v(a);
                Tensor::from_parts(a.shape().to_vec(), softmax_rows(a.values(), a.cols()))
            }
            Op::Log(a) => map(v(a), f64::ln),
            Op::Sqrt(a) => map(v(a), f64::sqrt),
            Op::ClampMin(a, floor) => map(v(a), |x| x.max(*floor)),
            Op::Sum(a) => Tensor::scalar(v(a).values().iter().sum()),
            Op::Mean(a) => {
                let a = v(a);
                Tensor::scalar(a.values().iter().sum::<f64>() / a.len() as f64)
            }
            Op::SumAxis(a, axis) => {
                let a = v(a);
                if a.shape().len() != 2 || *axis > 1 {
                    return Err(mismatch(format!("axis {axis} of {:?}", a.shape())));
                }
                let (r, c) = (a.shape()[0], a.shape()[1]);
                if *axis == 0 {
                    let mut out = vec![0.0; c];
                    for row in a.values().chunks(c) {
                        for (o, x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    Tensor::from_parts(vec![c], out)
                } else {
                    let out = a.values().chunks(c).map(|row| row.iter().sum()).collect();
                    Tensor::from_parts(vec![r], out)
                }
            }
            Op::Transpose(a) => {
                let a = v(a);
                if a.shape().len() != 2 {
                    return Err(mismatch(format!("transpose of {:?}", a.shape())));
                }
                let (r, c) = (a.shape()[0], a.shape()[1]);
                Tensor::from_parts(vec![c, r], transpose(a.values(), r, c))
            }
            Op::Gather {
                input,
                indices,
                shape,
            } => {
                let a = v(input);
                let n: usize = shape.iter().product();
                if n != indices.len() || shape.contains(&0) {
                    return Err(mismatch(format!(
                        "{} indices for output shape {shape:?}",
                        indices.len()
                    )));
                }
                if let Some(bad) = indices.iter().find(|&&i| i >= a.len()) {
                    return Err(mismatch(format!(
                        "index {bad} out of range for {:?}",
                        a.shape()
                    )));
                }
                let av = a.values();
                Tensor::from_parts(shape.clone(), indices.iter().map(|&i| av[i]).collect())
            }
            Op::Reshape(a, shape) => {
                let a = v(a);
                if shape.iter().product::<usize>() != a.len() || shape.contains(&0) {
                    return Err(mismatch(format!("{:?} into {shape:?}", a.shape())));
                }
                Tensor::from_parts(shape.clone(), a.values().to_vec())
            }
        })
    }

    fn backward(&self, values: &[Tensor], out: NodeId) -> Result<Vec<Option<Tensor>>, NumError> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        adj[out.0] = Some(vec![1.0]);

        fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
            match slot {
                Some(existing) => {
                    for (e, g) in existing.iter_mut().zip(grad) {
                        *e += g;
                    }
                }
                None => *slot = Some(grad),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let op = &self.nodes[idx];
            let y = &values[idx];
            match op {
                Op::Input(_) | Op::Constant(_) => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let bt = transpose(bv.values(), k, n);
                    let ga = matmul(&g, &bt, m, n, k);
                    let at = transpose(av.values(), m, k);
                    let gb = matmul(&at, &g, k, m, n);
                    accumulate(&mut adj[a.0], ga);
                    accumulate(&mut adj[b.0], gb);
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    let mode = broadcast(av.shape(), bv.shape()).expect("checked in forward");
                    let a_bc = matches!(mode, Broadcast::LhsScalar | Broadcast::LhsRow);
                    let b_bc = matches!(mode, Broadcast::RhsScalar | Broadcast::RhsRow);
                    let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                        Op::Add(..) => (g.clone(), g.clone()),
                        Op::Sub(..) => (g.clone(), g.iter().map(|x| -x).collect()),
                        _ => {
                            let at = |i: usize| av.values()[i % av.len()];
                            let bt = |i: usize| bv.values()[i % bv.len()];
                            (
                                g.iter().enumerate().map(|(i, x)| x * bt(i)).collect(),
                                g.iter().enumerate().map(|(i, x)| x * at(i)).collect(),
                            )
                        }
                    };
                    accumulate(&mut adj[a.0], reduce_to(&ga, av.len(), a_bc));
                    accumulate(&mut adj[b.0], reduce_to(&gb, bv.len(), b_bc));
                }
                Op::Scale(a, s) => accumulate(&mut adj[a.0], g.iter().map(|x| x * s).collect()),
                Op::Relu(a) => {
                    let x = values[a.0].values();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Softmax(a) => {
                    let c = y.cols();
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g.chunks(c).zip(y.values().chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, gi), yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Log(a) => {
                    let x = values[a.0].values();
                    accumulate(&mut adj[a.0], g.iter().zip(x).map(|(gi, xi)| gi / xi).collect());
                }
                Op::Sqrt(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(y.values())
                        .map(|(gi, yi)| gi * 0.5 / yi)
                        .collect();
                    if ga.iter().any(|v| !v.is_finite()) {
                        return Err(NumError::NonFinite {
                            node: idx,
                            op: "sqrt (gradient)",
                        });
                    }
                    accumulate(&mut adj[a.0], ga);
                }
                Op::ClampMin(a, floor) => {
                    let x = values[a.0].values();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > *floor { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Sum(a) => accumulate(&mut adj[a.0], vec![g[0]; values[a.0].len()]),
                Op::Mean(a) => {
                    let n = values[a.0].len();
                    accumulate(&mut adj[a.0], vec![g[0] / n as f64; n]);
                }
                Op::SumAxis(a, axis) => {
                    let av = &values[a.0];
                    let (r, c) = (av.shape()[0], av.shape()[1]);
                    let ga = (0..r * c)
                        .map(|i| if *axis == 0 { g[i % c] } else { g[i / c] })
                        .collect();
                    accumulate(&mut adj[a.0], ga);
                }
                Op::Transpose(a) => {
                    let (r, c) = (y.shape()[0], y.shape()[1]);
                    accumulate(&mut adj[a.0], transpose(&g, r, c));
                }
                Op::Gather { input, indices, .. } => {
                    let mut ga = vec![0.0; values[input.0].len()];
                    for (gi, &src) in g.iter().zip(indices) {
                        ga[src] += gi;
                    }
                    accumulate(&mut adj[input.0], ga);
                }
                Op::Reshape(a, _) => accumulate(&mut adj[a.0], g),
            }
        }

        Ok(adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(values[i].shape().to_vec(), g)))
            .collect())
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.values().iter().map(|&x| f(x)).collect())
}
