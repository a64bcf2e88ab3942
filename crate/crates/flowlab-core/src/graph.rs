//! Dynamic-tape reverse-mode differentiation.
//!
//! Each forward pass builds a fresh acyclic graph of [`Node`]s; `backward`
//! walks it once in reverse topological order and accumulates gradients into
//! per-node buffers. Gradients are plain [`Tensor`]s, never nodes, so the
//! engine is first-order by construction: there is no way to record the
//! derivative of a derivative.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::ops::Range;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::CoreError;
use crate::math;
use crate::tensor::Tensor;
use crate::Result;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Operation kind attached to every node, used by structural graph scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Op {
    Parameter,
    Constant,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Tanh,
    Silu,
    Square,
    Sum,
    Mean,
    ConcatCols,
    SliceCols,
    GatherRows,
    MeanRows,
    BroadcastRow,
    LayerNorm,
    StopGradient,
}

impl Op {
    pub fn name(self) -> &'static str {
        match self {
            Op::Parameter => "parameter",
            Op::Constant => "constant",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Scale => "scale",
            Op::Tanh => "tanh",
            Op::Silu => "silu",
            Op::Square => "square",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols => "slice_cols",
            Op::GatherRows => "gather_rows",
            Op::MeanRows => "mean_rows",
            Op::BroadcastRow => "broadcast_row",
            Op::LayerNorm => "layer_norm",
            Op::StopGradient => "stop_gradient",
        }
    }

    /// Every op this engine can record. All of them map value tensors to
    /// value tensors; none consumes or produces a gradient.
    pub fn all() -> &'static [Op] {
        &[
            Op::Parameter,
            Op::Constant,
            Op::MatMul,
            Op::Add,
            Op::Sub,
            Op::Mul,
            Op::AddRow,
            Op::Scale,
            Op::Tanh,
            Op::Silu,
            Op::Square,
            Op::Sum,
            Op::Mean,
            Op::ConcatCols,
            Op::SliceCols,
            Op::GatherRows,
            Op::MeanRows,
            Op::BroadcastRow,
            Op::LayerNorm,
            Op::StopGradient,
        ]
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[Node]) -> Result<Vec<Tensor>>>;

struct NodeInner {
    id: u64,
    op: Op,
    value: RefCell<Tensor>,
    grad: RefCell<Tensor>,
    parents: Vec<Node>,
    backward: Option<BackwardFn>,
    trainable: bool,
}

/// A value in the computation graph. Cloning is cheap (shared reference).
#[derive(Clone)]
pub struct Node {
    inner: Rc<NodeInner>,
}

impl Node {
    fn make(op: Op, value: Tensor, parents: Vec<Node>, backward: Option<BackwardFn>) -> Result<Node> {
        value.ensure_finite(op.name())?;
        let [r, c] = value.shape();
        Ok(Node {
            inner: Rc::new(NodeInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op,
                value: RefCell::new(value),
                grad: RefCell::new(Tensor::zeros(r, c)),
                parents,
                backward,
                trainable: false,
            }),
        })
    }

    pub fn constant(value: Tensor) -> Node {
        Node::make(Op::Constant, value, vec![], None).expect("constants must be finite")
    }

    /// A trainable leaf. Use [`crate::params::ParamStore`] to register these.
    pub fn parameter(value: Tensor) -> Node {
        let [r, c] = value.shape();
        Node {
            inner: Rc::new(NodeInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                op: Op::Parameter,
                value: RefCell::new(value),
                grad: RefCell::new(Tensor::zeros(r, c)),
                parents: vec![],
                backward: None,
                trainable: true,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn op(&self) -> Op {
        self.inner.op
    }

    pub fn is_trainable(&self) -> bool {
        self.inner.trainable
    }

    pub fn parents(&self) -> &[Node] {
        &self.inner.parents
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.inner.value.borrow()
    }

    pub fn value_clone(&self) -> Tensor {
        self.inner.value.borrow().clone()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.inner.value.borrow().shape()
    }

    pub fn grad(&self) -> Tensor {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        let [r, c] = g.shape();
        *g = Tensor::zeros(r, c);
    }

    /// Overwrites a leaf's value (optimizer updates, finite-difference probes).
    pub fn set_value(&self, value: Tensor) -> Result<()> {
        {
            let current = self.inner.value.borrow();
            if current.shape() != value.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "set_value",
                    detail: format!("{:?} vs {:?}", current.shape(), value.shape()),
                });
            }
        }
        value.ensure_finite("set_value")?;
        *self.inner.value.borrow_mut() = value;
        Ok(())
    }

    fn accumulate_grad(&self, contribution: &Tensor) -> Result<()> {
        let mut g = self.inner.grad.borrow_mut();
        let updated = g.add(contribution)?;
        *g = updated;
        Ok(())
    }

    // ----- differentiable operations -------------------------------------

    pub fn matmul(&self, rhs: &Node) -> Result<Node> {
        let value = self.value().matmul(&rhs.value())?;
        let back: BackwardFn = Box::new(|g, parents| {
            let a = parents[0].value();
            let b = parents[1].value();
            let da = g.matmul(&b.transpose())?;
            let db = a.transpose().matmul(g)?;
            Ok(vec![da, db])
        });
        Node::make(Op::MatMul, value, vec![self.clone(), rhs.clone()], Some(back))
    }

    pub fn add(&self, rhs: &Node) -> Result<Node> {
        let value = self.value().add(&rhs.value())?;
        let back: BackwardFn = Box::new(|g, _| Ok(vec![g.clone(), g.clone()]));
        Node::make(Op::Add, value, vec![self.clone(), rhs.clone()], Some(back))
    }

    pub fn sub(&self, rhs: &Node) -> Result<Node> {
        let value = self.value().sub(&rhs.value())?;
        let back: BackwardFn = Box::new(|g, _| Ok(vec![g.clone(), g.scale(-1.0)?]));
        Node::make(Op::Sub, value, vec![self.clone(), rhs.clone()], Some(back))
    }

    pub fn mul(&self, rhs: &Node) -> Result<Node> {
        let value = self.value().mul(&rhs.value())?;
        let back: BackwardFn = Box::new(|g, parents| {
            let a = parents[0].value();
            let b = parents[1].value();
            Ok(vec![g.mul(&b)?, g.mul(&a)?])
        });
        Node::make(Op::Mul, value, vec![self.clone(), rhs.clone()], Some(back))
    }

    /// Adds a `1xD` bias row to every row of a `BxD` tensor.
    pub fn add_row(&self, bias: &Node) -> Result<Node> {
        let x = self.value();
        let b = bias.value();
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(CoreError::ShapeMismatch {
                op: "add_row",
                detail: format!("{:?} + {:?}", x.shape(), b.shape()),
            });
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.set(r, c, out.get(r, c) + b.get(0, c));
            }
        }
        drop(x);
        drop(b);
        let back: BackwardFn = Box::new(|g, _| {
            let mut db = Tensor::zeros(1, g.cols());
            for r in 0..g.rows() {
                for c in 0..g.cols() {
                    db.set(0, c, db.get(0, c) + g.get(r, c));
                }
            }
            Ok(vec![g.clone(), db])
        });
        Node::make(Op::AddRow, out, vec![self.clone(), bias.clone()], Some(back))
    }

    pub fn scale(&self, factor: f64) -> Result<Node> {
        let value = self.value().scale(factor)?;
        let back: BackwardFn = Box::new(move |g, _| Ok(vec![g.scale(factor)?]));
        Node::make(Op::Scale, value, vec![self.clone()], Some(back))
    }

    pub fn tanh(&self) -> Result<Node> {
        let value = self.value().map("tanh", math::tanh)?;
        let y = value.clone();
        let back: BackwardFn = Box::new(move |g, _| {
            Ok(vec![g.zip_with(&y, "tanh_back", |gi, yi| gi * (1.0 - yi * yi))?])
        });
        Node::make(Op::Tanh, value, vec![self.clone()], Some(back))
    }

    pub fn silu(&self) -> Result<Node> {
        let value = self.value().map("silu", math::silu)?;
        let back: BackwardFn = Box::new(|g, parents| {
            let x = parents[0].value();
            Ok(vec![g.zip_with(&x, "silu_back", |gi, xi| {
                let s = math::sigmoid(xi);
                gi * (s * (1.0 + xi * (1.0 - s)))
            })?])
        });
        Node::make(Op::Silu, value, vec![self.clone()], Some(back))
    }

    pub fn square(&self) -> Result<Node> {
        let value = self.value().map("square", |v| v * v)?;
        let back: BackwardFn = Box::new(|g, parents| {
            let x = parents[0].value();
            Ok(vec![g.zip_with(&x, "square_back", |gi, xi| 2.0 * xi * gi)?])
        });
        Node::make(Op::Square, value, vec![self.clone()], Some(back))
    }

    pub fn sum(&self) -> Result<Node> {
        let [r, c] = self.shape();
        let value = Tensor::scalar(self.value().sum());
        let back: BackwardFn = Box::new(move |g, _| {
            let gv = g.item()?;
            Ok(vec![Tensor::full(r, c, gv)])
        });
        Node::make(Op::Sum, value, vec![self.clone()], Some(back))
    }

    pub fn mean(&self) -> Result<Node> {
        let [r, c] = self.shape();
        let n = (r * c) as f64;
        let value = Tensor::scalar(self.value().mean());
        let back: BackwardFn = Box::new(move |g, _| {
            let gv = g.item()? / n;
            Ok(vec![Tensor::full(r, c, gv)])
        });
        Node::make(Op::Mean, value, vec![self.clone()], Some(back))
    }

    /// Keeps a column range of a `BxD` tensor.
    pub fn slice_cols(&self, range: Range<usize>) -> Result<Node> {
        let x = self.value();
        let [rows, cols] = x.shape();
        if range.end > cols || range.start >= range.end {
            return Err(CoreError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("range {range:?} of {cols} columns"),
            });
        }
        let width = range.end - range.start;
        let mut out = Tensor::zeros(rows, width);
        for r in 0..rows {
            for (j, c) in range.clone().enumerate() {
                out.set(r, j, x.get(r, c));
            }
        }
        drop(x);
        let back_range = range.clone();
        let back: BackwardFn = Box::new(move |g, _| {
            let mut dx = Tensor::zeros(rows, cols);
            for r in 0..rows {
                for (j, c) in back_range.clone().enumerate() {
                    dx.set(r, c, g.get(r, j));
                }
            }
            Ok(vec![dx])
        });
        Node::make(Op::SliceCols, out, vec![self.clone()], Some(back))
    }

    /// Mean over rows: `MxD -> 1xD`.
    pub fn mean_rows(&self) -> Result<Node> {
        let x = self.value();
        let [rows, cols] = x.shape();
        let mut out = Tensor::zeros(1, cols);
        for c in 0..cols {
            let mut s = 0.0;
            for r in 0..rows {
                s += x.get(r, c);
            }
            out.set(0, c, s / rows as f64);
        }
        drop(x);
        let back: BackwardFn = Box::new(move |g, _| {
            let mut dx = Tensor::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    dx.set(r, c, g.get(0, c) / rows as f64);
                }
            }
            Ok(vec![dx])
        });
        Node::make(Op::MeanRows, out, vec![self.clone()], Some(back))
    }

    /// Repeats a `1xD` row into a `BxD` tensor.
    pub fn broadcast_row(&self, rows: usize) -> Result<Node> {
        let x = self.value();
        if x.rows() != 1 {
            return Err(CoreError::ShapeMismatch {
                op: "broadcast_row",
                detail: format!("expected 1xD, got {:?}", x.shape()),
            });
        }
        let cols = x.cols();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, x.get(0, c));
            }
        }
        drop(x);
        let back: BackwardFn = Box::new(move |g, _| {
            let mut dx = Tensor::zeros(1, cols);
            for r in 0..rows {
                for c in 0..cols {
                    dx.set(0, c, dx.get(0, c) + g.get(r, c));
                }
            }
            Ok(vec![dx])
        });
        Node::make(Op::BroadcastRow, out, vec![self.clone()], Some(back))
    }

    /// Row-wise layer normalization without learnable affine terms.
    pub fn layer_norm(&self, eps: f64) -> Result<Node> {
        let x = self.value();
        let [rows, cols] = x.shape();
        let mut out = Tensor::zeros(rows, cols);
        let mut sigmas = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = x.row_slice(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let sigma = math::sqrt(var + eps);
            sigmas.push(sigma);
            for c in 0..cols {
                out.set(r, c, (row[c] - mu) / sigma);
            }
        }
        drop(x);
        let xhat = out.clone();
        let back: BackwardFn = Box::new(move |g, _| {
            let mut dx = Tensor::zeros(rows, cols);
            for r in 0..rows {
                let mut g_mean = 0.0;
                let mut gx_mean = 0.0;
                for c in 0..cols {
                    g_mean += g.get(r, c);
                    gx_mean += g.get(r, c) * xhat.get(r, c);
                }
                g_mean /= cols as f64;
                gx_mean /= cols as f64;
                for c in 0..cols {
                    let v = (g.get(r, c) - g_mean - xhat.get(r, c) * gx_mean) / sigmas[r];
                    dx.set(r, c, v);
                }
            }
            dx.ensure_finite("layer_norm_back")?;
            Ok(vec![dx])
        });
        Node::make(Op::LayerNorm, out, vec![self.clone()], Some(back))
    }

    /// Value identity whose backward pass propagates nothing into the input
    /// subgraph. Gradients behind the boundary are exactly zero.
    pub fn stop_gradient(&self) -> Node {
        Node::make(Op::StopGradient, self.value_clone(), vec![self.clone()], None)
            .expect("value already validated")
    }
}

/// Concatenates `BxDi` tensors along columns.
pub fn concat_cols(parts: &[Node]) -> Result<Node> {
    if parts.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    let rows = parts[0].shape()[0];
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        let [r, c] = p.shape();
        if r != rows {
            return Err(CoreError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts differ: {rows} vs {r}"),
            });
        }
        widths.push(c);
        total += c;
    }
    let mut out = Tensor::zeros(rows, total);
    let mut offset = 0;
    for p in parts {
        let v = p.value();
        for r in 0..rows {
            for c in 0..v.cols() {
                out.set(r, offset + c, v.get(r, c));
            }
        }
        offset += v.cols();
    }
    let back: BackwardFn = Box::new(move |g, parents| {
        let mut grads = Vec::with_capacity(parents.len());
        let mut offset = 0;
        for p in parents {
            let [r, c] = p.shape();
            let mut dp = Tensor::zeros(r, c);
            for rr in 0..r {
                for cc in 0..c {
                    dp.set(rr, cc, g.get(rr, offset + cc));
                }
            }
            grads.push(dp);
            offset += c;
        }
        Ok(grads)
    });
    Node::make(Op::ConcatCols, out, parts.to_vec(), Some(back))
}

/// Embedding lookup: selects rows of `table` (`RxD`) by index, producing
/// `BxD`. The backward pass scatter-adds into the selected rows.
pub fn gather_rows(table: &Node, ids: &[usize]) -> Result<Node> {
    let t = table.value();
    let [rows, cols] = t.shape();
    for &id in ids {
        if id >= rows {
            return Err(CoreError::ConditionOutOfRange { id, conditions: rows });
        }
    }
    let mut out = Tensor::zeros(ids.len(), cols);
    for (r, &id) in ids.iter().enumerate() {
        for c in 0..cols {
            out.set(r, c, t.get(id, c));
        }
    }
    drop(t);
    let ids_owned: Vec<usize> = ids.to_vec();
    let back: BackwardFn = Box::new(move |g, _| {
        let mut dt = Tensor::zeros(rows, cols);
        for (r, &id) in ids_owned.iter().enumerate() {
            for c in 0..cols {
                dt.set(id, c, dt.get(id, c) + g.get(r, c));
            }
        }
        Ok(vec![dt])
    });
    Node::make(Op::GatherRows, out, vec![table.clone()], Some(back))
}

/// Collects the backward traversal order: reverse topological order of the
/// subgraph reachable from `root` without crossing stop-gradient boundaries.
fn backward_order(root: &Node) -> Vec<Node> {
    let mut post = Vec::new();
    let mut visited = BTreeSet::new();
    // (node, expanded) pairs for an iterative post-order walk.
    let mut stack: Vec<(Node, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            post.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if node.op() != Op::StopGradient {
            for p in node.parents() {
                if !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    post.reverse();
    post
}

/// Reverse-mode accumulation from a scalar root. Every trainable leaf
/// reachable from `root` (outside stop-gradient subgraphs) receives
/// `d(root)/d(leaf)` added into its grad buffer.
pub fn backward(root: &Node) -> Result<()> {
    let shape = root.shape();
    if shape[0] * shape[1] != 1 {
        return Err(CoreError::NonScalarRoot { shape });
    }
    root.accumulate_grad(&Tensor::scalar(1.0))?;
    for node in backward_order(root) {
        if let Some(back) = node.inner.backward.as_ref() {
            let grad = node.inner.grad.borrow().clone();
            let contributions = back(&grad, node.parents())?;
            debug_assert_eq!(contributions.len(), node.parents().len());
            for (parent, contribution) in node.parents().iter().zip(contributions.iter()) {
                parent.accumulate_grad(contribution)?;
            }
        }
    }
    Ok(())
}

/// Walks the entire graph (including through stop-gradient nodes) and counts
/// nodes per operation. Used by the structural first-order audit.
pub fn op_census(root: &Node) -> BTreeMap<&'static str, usize> {
    let mut census = BTreeMap::new();
    let mut visited = BTreeSet::new();
    let mut stack = vec![root.clone()];
    while let Some(node) = stack.pop() {
        if !visited.insert(node.id()) {
            continue;
        }
        *census.entry(node.op().name()).or_insert(0) += 1;
        for p in node.parents() {
            stack.push(p.clone());
        }
    }
    census
}

/// True when every node in the graph is one of the known first-order value
/// ops. Gradients in this engine are plain tensors, so derivative-of-
/// derivative nodes cannot exist; this check certifies that structurally.
pub fn is_first_order(root: &Node) -> bool {
    let known: BTreeSet<&'static str> = Op::all().iter().map(|o| o.name()).collect();
    op_census(root).keys().all(|k| known.contains(k))
}
