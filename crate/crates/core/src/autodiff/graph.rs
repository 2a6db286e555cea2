use std::collections::{BTreeMap, HashMap};

use super::kernels;
use super::{Array, AutodiffError};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// Non-trainable named leaf.
    Input(String),
    /// Trainable named leaf.
    Param(String),
    Const(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Gather(NodeId, Vec<usize>),
    Clip(NodeId, f64, f64),
    StopGrad(NodeId),
    Embedding(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Gather(..) => "gather",
            Op::Clip(..) => "clip",
            Op::StopGrad(_) => "stop_gradient",
            Op::Embedding(..) => "embedding",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// A computation DAG over [`Array`]s.
///
/// Nodes may only refer to earlier nodes, so the graph is acyclic by
/// construction. Shape errors found while building are deferred and
/// reported by [`Graph::evaluate`].
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
    error: Option<AutodiffError>,
}

/// Values of every node after a forward pass.
#[derive(Debug, Clone)]
pub struct Evaluation {
    values: Vec<Array>,
}

impl Evaluation {
    pub fn get(&self, node: NodeId) -> &Array {
        &self.values[node.0]
    }

    pub fn scalar(&self, node: NodeId) -> f64 {
        self.values[node.0].item()
    }
}

/// Gradients of a scalar output with respect to every trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct GradientReport {
    pub grads: BTreeMap<String, Array>,
    /// Filled in by gradient checks.
    pub max_rel_error: Option<f64>,
}

impl GradientReport {
    pub fn get(&self, name: &str) -> Option<&Array> {
        self.grads.get(name)
    }

    /// Global L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.grads.values().map(Array::norm_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Array::all_finite)
    }

    /// Elementwise `self += other * weight`, adding missing entries.
    pub fn accumulate(&mut self, other: &GradientReport, weight: f64) {
        for (name, g) in &other.grads {
            let slot = self
                .grads
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            for (s, &v) in slot.data_mut().iter_mut().zip(g.data()) {
                *s += weight * v;
            }
        }
    }
}

pub type Bindings = HashMap<String, Array>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, node: NodeId) -> &[usize] {
        &self.nodes[node.0].shape
    }

    /// Names of all trainable leaves.
    pub fn parameters(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.clone()),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn fail(&mut self, op: &'static str, detail: String) -> Vec<usize> {
        if self.error.is_none() {
            self.error = Some(AutodiffError::ShapeMismatch {
                node: self.nodes.len(),
                op,
                detail,
            });
        }
        vec![1]
    }

    fn leaf(&mut self, name: &str, shape: &[usize], trainable: bool) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            if self.nodes[id.0].shape != shape {
                let detail = format!(
                    "leaf {name} redeclared with shape {shape:?}, was {:?}",
                    self.nodes[id.0].shape
                );
                self.fail("leaf", detail);
            }
            return id;
        }
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Input(name.to_string())
        };
        let id = self.push(op, shape.to_vec());
        self.leaves.insert(name.to_string(), id);
        id
    }

    /// Trainable leaf bound by name at evaluation time.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.leaf(name, shape, true)
    }

    /// Non-trainable leaf bound by name at evaluation time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.leaf(name, shape, false)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    fn same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Vec<usize> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            sa
        } else {
            self.fail(op, format!("{sa:?} vs {sb:?}"))
        }
    }

    /// Elementwise sum; `b` may also be a row vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = if sa == sb || (sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0]) {
            sa
        } else {
            self.fail("add", format!("{sa:?} vs {sb:?}"))
        };
        self.push(Op::Add(a, b), shape)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.same_shape("sub", a, b);
        self.push(Op::Sub(a, b), shape)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let shape = self.same_shape("mul", a, b);
        self.push(Op::Mul(a, b), shape)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Scale(a, factor), shape)
    }

    /// Add a constant.
    pub fn offset(&mut self, a: NodeId, value: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Offset(a, value), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => vec![*m, *n],
            _ => self.fail("matmul", format!("{sa:?} x {sb:?}")),
        };
        self.push(Op::MatMul(a, b), shape)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [n, k2]) if k == k2 => vec![*m, *n],
            _ => self.fail("matmul_nt", format!("{sa:?} x {sb:?}^T")),
        };
        self.push(Op::MatMulNt(a, b), shape)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Exp(a), shape)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Log(a), shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Tanh(a), shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Softmax(a), shape)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::LogSoftmax(a), shape)
    }

    /// Sum of all elements (scalar output).
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    /// Mean of all elements (scalar output).
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), Vec::new())
    }

    /// `out[i] = a[i, indices[i]]` for a `[m, n]` input.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let sa = self.shape(a).to_vec();
        let shape = match sa.as_slice() {
            [m, n] if *m == indices.len() && indices.iter().all(|&i| i < *n) => vec![*m],
            _ => self.fail("gather", format!("{sa:?} with {} indices", indices.len())),
        };
        self.push(Op::Gather(a, indices), shape)
    }

    /// Clamp into `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clip(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::Clip(a, lo, hi), shape)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        self.push(Op::StopGrad(a), shape)
    }

    /// Row lookup into a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        let st = self.shape(table).to_vec();
        let shape = match st.as_slice() {
            [v, d] if indices.iter().all(|&i| i < *v) && !indices.is_empty() => {
                vec![indices.len(), *d]
            }
            _ => self.fail("embedding", format!("table {st:?} with indices {indices:?}")),
        };
        self.push(Op::Embedding(table, indices), shape)
    }

    /// Elementwise minimum, composed as `a - clip(a - b, 0, inf)`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let excess = self.clip(d, 0.0, f64::INFINITY);
        self.sub(a, excess)
    }

    /// Forward pass over the whole graph.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Evaluation, AutodiffError> {
        if let Some(err) = &self.error {
            return Err(err.clone());
        }
        let mut values: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = |id: NodeId| &values[id.0];
            let out = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let bound = bindings
                        .get(name)
                        .ok_or_else(|| AutodiffError::Unbound(name.clone()))?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(AutodiffError::ShapeMismatch {
                            node: idx,
                            op: node.op.name(),
                            detail: format!(
                                "binding {name} has shape {:?}, expected {:?}",
                                bound.shape(),
                                node.shape
                            ),
                        });
                    }
                    bound.clone()
                }
                Op::Const(a) => a.clone(),
                Op::Add(a, b) => kernels::add(v(*a), v(*b)),
                Op::Sub(a, b) => kernels::zip_map(v(*a), v(*b), |x, y| x - y),
                Op::Mul(a, b) => kernels::zip_map(v(*a), v(*b), |x, y| x * y),
                Op::Scale(a, c) => kernels::map(v(*a), |x| x * c),
                Op::Offset(a, c) => kernels::map(v(*a), |x| x + c),
                Op::MatMul(a, b) => kernels::matmul(v(*a), v(*b)),
                Op::MatMulNt(a, b) => kernels::matmul_nt(v(*a), v(*b)),
                Op::Exp(a) => kernels::map(v(*a), f64::exp),
                Op::Log(a) => kernels::map(v(*a), f64::ln),
                Op::Tanh(a) => kernels::map(v(*a), f64::tanh),
                Op::Softmax(a) => kernels::softmax_rows(v(*a)),
                Op::LogSoftmax(a) => kernels::log_softmax_rows(v(*a)),
                Op::Sum(a) => Array::scalar(v(*a).sum()),
                Op::Mean(a) => {
                    let x = v(*a);
                    Array::scalar(x.sum() / x.len() as f64)
                }
                Op::Gather(a, idx) => {
                    let x = v(*a);
                    Array::vector(idx.iter().enumerate().map(|(r, &i)| x.row(r)[i]).collect())
                }
                Op::Clip(a, lo, hi) => kernels::map(v(*a), |x| x.clamp(*lo, *hi)),
                Op::StopGrad(a) => v(*a).clone(),
                Op::Embedding(t, idx) => kernels::embedding(v(*t), idx),
            };
            if !out.all_finite() {
                return Err(AutodiffError::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(out);
        }
        Ok(Evaluation { values })
    }

    /// Reverse-mode gradient of the scalar `output` with respect to every parameter.
    ///
    /// Parameters the output does not depend on receive zero gradients.
    pub fn gradient(
        &self,
        eval: &Evaluation,
        output: NodeId,
    ) -> Result<GradientReport, AutodiffError> {
        let out_val = eval.get(output);
        if out_val.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_val.shape().to_vec()));
        }
        let mut adj: Vec<Option<Array>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Array::filled(out_val.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param(_) => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Input(_) | Op::Const(_) | Op::StopGrad(_) => {}
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    let sb = eval.get(*b).shape();
                    if sb == g.shape() {
                        accumulate(&mut adj, *b, &g);
                    } else {
                        let w = g.last_dim();
                        let mut col = vec![0.0; w];
                        for r in 0..g.rows() {
                            for (c, &x) in col.iter_mut().zip(g.row(r)) {
                                *c += x;
                            }
                        }
                        accumulate(&mut adj, *b, &Array::from_parts(sb.to_vec(), col));
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &kernels::map(&g, |x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = kernels::zip_map(&g, eval.get(*b), |x, y| x * y);
                    let gb = kernels::zip_map(&g, eval.get(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, &kernels::map(&g, |x| x * c)),
                Op::Offset(a, _) => accumulate(&mut adj, *a, &g),
                Op::MatMul(a, b) => {
                    // out = A B: dA = G B^T, dB = A^T G
                    let ga = kernels::matmul_nt(&g, eval.get(*b));
                    let gb = kernels::matmul_tn(eval.get(*a), &g);
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::MatMulNt(a, b) => {
                    // out = A B^T: dA = G B, dB = G^T A
                    let ga = kernels::matmul(&g, eval.get(*b));
                    let gb = kernels::matmul_tn(&g, eval.get(*a));
                    accumulate(&mut adj, *a, &ga);
                    accumulate(&mut adj, *b, &gb);
                }
                Op::Exp(a) => {
                    let ga = kernels::zip_map(&g, eval.get(NodeId(idx)), |x, y| x * y);
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Log(a) => {
                    let ga = kernels::zip_map(&g, eval.get(*a), |x, y| x / y);
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Tanh(a) => {
                    let ga = kernels::zip_map(&g, eval.get(NodeId(idx)), |x, y| x * (1.0 - y * y));
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Softmax(a) => {
                    let y = eval.get(NodeId(idx));
                    let mut ga = Array::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = kernels::dot(yr, gr);
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::LogSoftmax(a) => {
                    let y = eval.get(NodeId(idx));
                    let mut ga = Array::zeros(y.shape());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Sum(a) => {
                    let ga = Array::filled(eval.get(*a).shape(), g.item());
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Mean(a) => {
                    let x = eval.get(*a);
                    let ga = Array::filled(x.shape(), g.item() / x.len() as f64);
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Gather(a, indices) => {
                    let mut ga = Array::zeros(eval.get(*a).shape());
                    for (r, &i) in indices.iter().enumerate() {
                        ga.row_mut(r)[i] += g.data()[r];
                    }
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Clip(a, lo, hi) => {
                    let ga = kernels::zip_map(&g, eval.get(*a), |gv, x| {
                        if x >= *lo && x <= *hi {
                            gv
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut adj, *a, &ga);
                }
                Op::Embedding(t, indices) => {
                    let mut gt = Array::zeros(eval.get(*t).shape());
                    for (r, &i) in indices.iter().enumerate() {
                        for (o, &gv) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut adj, *t, &gt);
                }
            }
        }

        let mut grads = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = adj
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array::zeros(&node.shape));
                grads.insert(name.clone(), g);
            }
        }
        Ok(GradientReport {
            grads,
            max_rel_error: None,
        })
    }

    /// Evaluate and return the scalar value of `output`.
    pub fn eval_scalar(&self, bindings: &Bindings, output: NodeId) -> Result<f64, AutodiffError> {
        let eval = self.evaluate(bindings)?;
        let v = eval.get(output);
        if v.len() != 1 {
            return Err(AutodiffError::NonScalarOutput(v.shape().to_vec()));
        }
        Ok(v.item())
    }
}

fn accumulate(adj: &mut [Option<Array>], node: NodeId, g: &Array) {
    match &mut adj[node.0] {
        Some(existing) => {
            for (e, &v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.clone()),
    }
}
