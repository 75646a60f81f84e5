//! Reverse-mode tape over dense f64 vectors.
//!
//! Each primitive is one paired forward/backward: the builder computes the
//! forward value immediately, and [`Tape::backward`] walks the recorded ops
//! in reverse, accumulating parameter gradients into a [`GradTape`].
//!
//! Leaf inputs and every op output are checked for NaN/Inf, so op inputs are
//! always previously validated values. Stop-gradient is a first-class node:
//! it copies its input's value and blocks the backward walk. For the
//! finite-difference checker the tape can replay recorded stop values, which
//! keeps stopped branches at their baseline while live branches are
//! perturbed.

use std::collections::HashMap;

use super::math;
use super::{GradTape, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param { name: String },
    StopGradient,
    EmbeddingLookup { table: usize, ids: Vec<usize>, width: usize },
    Affine { w: usize, b: usize, x: usize, out_dim: usize, in_dim: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Concat { xs: Vec<usize> },
    MeanPool { x: usize, chunks: usize },
    L2Normalize { x: usize },
    Dot { a: usize, b: usize },
    Softmax { x: usize },
    WeightedSum { weights: usize, vectors: Vec<usize> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sum { x: usize },
    MeanScalars { xs: Vec<usize> },
    MseLoss { a: usize, b: usize },
    BceLoss { yhat: usize, y: f64 },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound_params: HashMap<String, NodeId>,
    stop_log: Vec<Vec<f64>>,
    stop_replay: Option<Vec<Vec<f64>>>,
    stop_cursor: usize,
}

fn ensure_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        Err(Error::NonFinite { op })
    } else {
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose stop-gradient nodes return pre-recorded values instead of
    /// their (possibly perturbed) inputs. Used by the gradient checker.
    pub fn with_stop_replay(stops: Vec<Vec<f64>>) -> Self {
        Tape { stop_replay: Some(stops), ..Self::default() }
    }

    /// Stop-gradient outputs recorded during the forward pass, in call order.
    pub fn stop_log(&self) -> &[Vec<f64>] {
        &self.stop_log
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(Error::Shape {
                op: "scalar",
                detail: format!("expected length 1, got {}", v.len()),
            });
        }
        Ok(v[0])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Result<NodeId> {
        ensure_finite("constant", &value)?;
        Ok(self.push(Op::Const, value))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Result<NodeId> {
        self.constant(vec![value])
    }

    /// Bind a named parameter from the store. Binding the same name twice on
    /// one tape returns the same node, so batch losses accumulate correctly.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.bound_params.get(name) {
            return Ok(id);
        }
        let values = store.values(name)?.to_vec();
        ensure_finite("param", &values)?;
        let id = self.push(Op::Param { name: name.to_string() }, values);
        self.bound_params.insert(name.to_string(), id);
        Ok(id)
    }

    /// Marks a value as constant for the backward pass. Forward value is a
    /// copy of the input (or the recorded baseline in replay mode).
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let value = match &self.stop_replay {
            Some(stops) => {
                let v = stops.get(self.stop_cursor).cloned().ok_or_else(|| {
                    Error::invalid("stop-gradient replay exhausted; loss function changed shape")
                })?;
                self.stop_cursor += 1;
                v
            }
            None => self.val(x).to_vec(),
        };
        self.stop_log.push(value.clone());
        Ok(self.push(Op::StopGradient, value))
    }

    /// Gather rows of a (rows, width) table node, concatenated in id order.
    pub fn embedding_lookup(&mut self, table: NodeId, ids: &[usize], width: usize) -> Result<NodeId> {
        let t = self.val(table);
        if width == 0 || t.len() % width != 0 {
            return Err(Error::Shape {
                op: "embedding_lookup",
                detail: format!("table length {} not divisible by width {width}", t.len()),
            });
        }
        let rows = t.len() / width;
        let mut value = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::Shape {
                    op: "embedding_lookup",
                    detail: format!("row {id} out of range for table with {rows} rows"),
                });
            }
            value.extend_from_slice(&t[id * width..(id + 1) * width]);
        }
        Ok(self.push(Op::EmbeddingLookup { table: table.0, ids: ids.to_vec(), width }, value))
    }

    /// y = W x + b, W row-major (out_dim, in_dim).
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let (wl, bl, xl) = (self.val(w).len(), self.val(b).len(), self.val(x).len());
        let (out_dim, in_dim) = (bl, xl);
        if wl != out_dim * in_dim {
            return Err(Error::Shape {
                op: "affine",
                detail: format!("weight length {wl} vs bias {out_dim} x input {in_dim}"),
            });
        }
        let value = math::affine(self.val(w), self.val(b), self.val(x), out_dim, in_dim);
        ensure_finite("affine", &value)?;
        Ok(self.push(Op::Affine { w: w.0, b: b.0, x: x.0, out_dim, in_dim }, value))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let value: Vec<f64> = self.val(x).iter().map(|&v| math::relu(v)).collect();
        Ok(self.push(Op::Relu { x: x.0 }, value))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let value: Vec<f64> = self.val(x).iter().map(|&v| math::sigmoid(v)).collect();
        ensure_finite("sigmoid", &value)?;
        Ok(self.push(Op::Sigmoid { x: x.0 }, value))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "concat", detail: "no inputs".to_string() });
        }
        let mut value = Vec::new();
        for &x in xs {
            value.extend_from_slice(self.val(x));
        }
        Ok(self.push(Op::Concat { xs: xs.iter().map(|id| id.0).collect() }, value))
    }

    /// Elementwise mean over `chunks` equal consecutive chunks.
    pub fn mean_pool(&mut self, x: NodeId, chunks: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if chunks == 0 || xv.len() % chunks != 0 {
            return Err(Error::Shape {
                op: "mean_pool",
                detail: format!("length {} not divisible by {chunks} chunks", xv.len()),
            });
        }
        let value = math::mean_chunks(xv, chunks);
        Ok(self.push(Op::MeanPool { x: x.0, chunks }, value))
    }

    /// x / ||x||_2. Errors on zero norm rather than epsilon-guarding.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        let norm = math::l2_norm(xv);
        if norm == 0.0 {
            return Err(Error::invalid("l2_normalize: zero-norm input"));
        }
        let value: Vec<f64> = xv.iter().map(|&v| v / norm).collect();
        ensure_finite("l2_normalize", &value)?;
        Ok(self.push(Op::L2Normalize { x: x.0 }, value))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.len() != bv.len() {
            return Err(Error::Shape {
                op: "dot",
                detail: format!("lengths {} vs {}", av.len(), bv.len()),
            });
        }
        let value = vec![math::dot(av, bv)];
        ensure_finite("dot", &value)?;
        Ok(self.push(Op::Dot { a: a.0, b: b.0 }, value))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.val(x);
        if xv.is_empty() {
            return Err(Error::Shape { op: "softmax", detail: "empty input".to_string() });
        }
        let value = math::softmax(xv);
        ensure_finite("softmax", &value)?;
        Ok(self.push(Op::Softmax { x: x.0 }, value))
    }

    /// out = sum_n weights[n] * vectors[n].
    pub fn weighted_sum(&mut self, weights: NodeId, vectors: &[NodeId]) -> Result<NodeId> {
        let wv = self.val(weights);
        if wv.len() != vectors.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("{} weights vs {} vectors", wv.len(), vectors.len()),
            });
        }
        if vectors.is_empty() {
            return Err(Error::Shape { op: "weighted_sum", detail: "no vectors".to_string() });
        }
        let m = self.val(vectors[0]).len();
        for (n, &vid) in vectors.iter().enumerate() {
            let v = self.val(vid);
            if v.len() != m {
                return Err(Error::Shape {
                    op: "weighted_sum",
                    detail: format!("vector {n} length {} vs {m}", v.len()),
                });
            }
        }
        let value = {
            let vecs: Vec<&[f64]> = vectors.iter().map(|&vid| self.val(vid)).collect();
            math::weighted_sum(self.val(weights), &vecs)
        };
        ensure_finite("weighted_sum", &value)?;
        Ok(self.push(
            Op::WeightedSum { weights: weights.0, vectors: vectors.iter().map(|v| v.0).collect() },
            value,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, value))
    }

    fn elementwise(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.len() != bv.len() {
            return Err(Error::Shape {
                op,
                detail: format!("lengths {} vs {}", av.len(), bv.len()),
            });
        }
        let value: Vec<f64> = av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect();
        ensure_finite(op, &value)?;
        Ok(value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let value: Vec<f64> = self.val(x).iter().map(|&v| v * c).collect();
        ensure_finite("scale", &value)?;
        Ok(self.push(Op::Scale { x: x.0, c }, value))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = vec![self.val(x).iter().sum()];
        ensure_finite("sum", &value)?;
        Ok(self.push(Op::Sum { x: x.0 }, value))
    }

    /// Mean of scalar nodes (batch loss aggregation).
    pub fn mean_scalars(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Shape { op: "mean_scalars", detail: "no inputs".to_string() });
        }
        let mut total = 0.0;
        for &x in xs {
            let v = self.val(x);
            if v.len() != 1 {
                return Err(Error::Shape {
                    op: "mean_scalars",
                    detail: format!("input of length {}, expected scalars", v.len()),
                });
            }
            total += v[0];
        }
        let value = vec![total / xs.len() as f64];
        ensure_finite("mean_scalars", &value)?;
        Ok(self.push(Op::MeanScalars { xs: xs.iter().map(|x| x.0).collect() }, value))
    }

    /// Mean over dimensions of squared differences.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.len() != bv.len() {
            return Err(Error::Shape {
                op: "mse_loss",
                detail: format!("lengths {} vs {}", av.len(), bv.len()),
            });
        }
        let n = av.len() as f64;
        let value = vec![av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n];
        ensure_finite("mse_loss", &value)?;
        Ok(self.push(Op::MseLoss { a: a.0, b: b.0 }, value))
    }

    /// Binary cross-entropy of a scalar prediction against label y in {0,1}.
    pub fn bce_loss(&mut self, yhat: NodeId, y: f64) -> Result<NodeId> {
        if y != 0.0 && y != 1.0 {
            return Err(Error::invalid(format!("bce_loss: label {y} must be 0 or 1")));
        }
        let p = self.scalar(yhat)?;
        let value = vec![math::bce(p, y)];
        ensure_finite("bce_loss", &value)?;
        Ok(self.push(Op::BceLoss { yhat: yhat.0, y }, value))
    }

    /// Backpropagate from a scalar loss node; returns gradients per bound
    /// parameter name. Parameters never reached carry no entry.
    pub fn backward(&self, loss: NodeId) -> Result<GradTape> {
        if self.val(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got length {}", self.val(loss).len()),
            });
        }
        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradTape::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param { name } => {
                    out.insert(name.clone(), g);
                }
                Op::StopGradient => {}
                Op::EmbeddingLookup { table, ids, width } => {
                    let len = self.nodes[*table].value.len();
                    let tg = acc(&mut grads[*table], len);
                    for (k, &id) in ids.iter().enumerate() {
                        for j in 0..*width {
                            tg[id * width + j] += g[k * width + j];
                        }
                    }
                }
                Op::Affine { w, b, x, out_dim, in_dim } => {
                    let xv = self.nodes[*x].value.clone();
                    let wv = self.nodes[*w].value.clone();
                    {
                        let wg = acc(&mut grads[*w], out_dim * in_dim);
                        for o in 0..*out_dim {
                            for j in 0..*in_dim {
                                wg[o * in_dim + j] += g[o] * xv[j];
                            }
                        }
                    }
                    {
                        let bg = acc(&mut grads[*b], *out_dim);
                        for o in 0..*out_dim {
                            bg[o] += g[o];
                        }
                    }
                    {
                        let xg = acc(&mut grads[*x], *in_dim);
                        for o in 0..*out_dim {
                            for j in 0..*in_dim {
                                xg[j] += g[o] * wv[o * in_dim + j];
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.nodes[*x].value.clone();
                    let xg = acc(&mut grads[*x], xv.len());
                    for j in 0..xv.len() {
                        if xv[j] > 0.0 {
                            xg[j] += g[j];
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let yv = node.value.clone();
                    let xg = acc(&mut grads[*x], yv.len());
                    for j in 0..yv.len() {
                        xg[j] += g[j] * yv[j] * (1.0 - yv[j]);
                    }
                }
                Op::Concat { xs } => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.nodes[x].value.len();
                        let xg = acc(&mut grads[x], len);
                        for j in 0..len {
                            xg[j] += g[offset + j];
                        }
                        offset += len;
                    }
                }
                Op::MeanPool { x, chunks } => {
                    let len = self.nodes[*x].value.len();
                    let m = len / chunks;
                    let xg = acc(&mut grads[*x], len);
                    for c in 0..*chunks {
                        for j in 0..m {
                            xg[c * m + j] += g[j] / *chunks as f64;
                        }
                    }
                }
                Op::L2Normalize { x } => {
                    let xv = self.nodes[*x].value.clone();
                    let yv = node.value.clone();
                    let norm = math::l2_norm(&xv);
                    let gy = math::dot(&g, &yv);
                    let xg = acc(&mut grads[*x], xv.len());
                    for j in 0..xv.len() {
                        xg[j] += (g[j] - yv[j] * gy) / norm;
                    }
                }
                Op::Dot { a, b } => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    {
                        let ag = acc(&mut grads[*a], av.len());
                        for j in 0..av.len() {
                            ag[j] += g[0] * bv[j];
                        }
                    }
                    let bg = acc(&mut grads[*b], bv.len());
                    for j in 0..bv.len() {
                        bg[j] += g[0] * av[j];
                    }
                }
                Op::Softmax { x } => {
                    let yv = node.value.clone();
                    let gy = math::dot(&g, &yv);
                    let xg = acc(&mut grads[*x], yv.len());
                    for j in 0..yv.len() {
                        xg[j] += yv[j] * (g[j] - gy);
                    }
                }
                Op::WeightedSum { weights, vectors } => {
                    let wv = self.nodes[*weights].value.clone();
                    {
                        let wg = acc(&mut grads[*weights], wv.len());
                        for (n, &vid) in vectors.iter().enumerate() {
                            wg[n] += math::dot(&g, &self.nodes[vid].value);
                        }
                    }
                    for (n, &vid) in vectors.iter().enumerate() {
                        let len = self.nodes[vid].value.len();
                        let vg = acc(&mut grads[vid], len);
                        for j in 0..len {
                            vg[j] += wv[n] * g[j];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for p in [*a, *b] {
                        let len = self.nodes[p].value.len();
                        let pg = acc(&mut grads[p], len);
                        for j in 0..len {
                            pg[j] += g[j];
                        }
                    }
                }
                Op::Sub { a, b } => {
                    {
                        let len = self.nodes[*a].value.len();
                        let ag = acc(&mut grads[*a], len);
                        for j in 0..len {
                            ag[j] += g[j];
                        }
                    }
                    let len = self.nodes[*b].value.len();
                    let bg = acc(&mut grads[*b], len);
                    for j in 0..len {
                        bg[j] -= g[j];
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    {
                        let ag = acc(&mut grads[*a], av.len());
                        for j in 0..av.len() {
                            ag[j] += g[j] * bv[j];
                        }
                    }
                    let bg = acc(&mut grads[*b], bv.len());
                    for j in 0..bv.len() {
                        bg[j] += g[j] * av[j];
                    }
                }
                Op::Scale { x, c } => {
                    let len = self.nodes[*x].value.len();
                    let xg = acc(&mut grads[*x], len);
                    for j in 0..len {
                        xg[j] += g[j] * c;
                    }
                }
                Op::Sum { x } => {
                    let len = self.nodes[*x].value.len();
                    let xg = acc(&mut grads[*x], len);
                    for v in xg.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::MeanScalars { xs } => {
                    let share = g[0] / xs.len() as f64;
                    for &x in xs {
                        acc(&mut grads[x], 1)[0] += share;
                    }
                }
                Op::MseLoss { a, b } => {
                    let av = self.nodes[*a].value.clone();
                    let bv = self.nodes[*b].value.clone();
                    let n = av.len() as f64;
                    {
                        let ag = acc(&mut grads[*a], av.len());
                        for j in 0..av.len() {
                            ag[j] += g[0] * 2.0 * (av[j] - bv[j]) / n;
                        }
                    }
                    let bg = acc(&mut grads[*b], bv.len());
                    for j in 0..bv.len() {
                        bg[j] -= g[0] * 2.0 * (av[j] - bv[j]) / n;
                    }
                }
                Op::BceLoss { yhat, y } => {
                    let p = self.nodes[*yhat].value[0];
                    // Zero slope outside the clip range.
                    let d = if (math::BCE_EPS..=1.0 - math::BCE_EPS).contains(&p) {
                        -y / p + (1.0 - y) / (1.0 - p)
                    } else {
                        0.0
                    };
                    acc(&mut grads[*yhat], 1)[0] += g[0] * d;
                }
            }
        }
        Ok(out)
    }
}
