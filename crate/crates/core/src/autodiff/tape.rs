//! Reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Tape`] records every primitive in evaluation order. Since inputs are
//! always created before the ops that consume them, the node vector is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Besides the generic primitives (matmul, concat, gather, segment
//! reductions, ...) the tape carries a handful of fused geometric ops used by
//! the aligned convolution: frame products on row-packed 3×3 matrices, the
//! linear kernel influence and the per-kernel-point aggregation.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row ranges: segment `s` covers rows `offsets[s]..offsets[s+1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_offsets(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) || offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::invalid("segment offsets must start at 0 and be nondecreasing"));
        }
        Ok(Self { offsets })
    }

    pub fn from_lengths<I: IntoIterator<Item = usize>>(lengths: I) -> Self {
        let mut offsets = vec![0];
        let mut acc = 0;
        for l in lengths {
            acc += l;
            offsets.push(acc);
        }
        Self { offsets }
    }

    /// Number of segments.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of rows covered.
    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    #[inline]
    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Relu(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<Segments>),
    SegmentMax(Var, Arc<Segments>, Vec<usize>),
    SegmentMean(Var, Arc<Segments>),
    Sum(Var),
    FrobeniusSq(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        probs: Tensor,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        mode: NormMode,
    },
    FrameTransposeApply(Var, Arc<Tensor>),
    RelativeFrames(Var, Var),
    ComposeFrames(Var, Var),
    OrthoLoss(Var),
    Influence {
        y: Var,
        kernel: Arc<[[f64; 3]]>,
        sigma: f64,
    },
    KernelAggregate {
        h: Var,
        f: Var,
        segments: Arc<Segments>,
        kernel_count: usize,
        frame_count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A pending running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean: BufferId,
    pub var: BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Records primitive operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
    kink_signature: u64,
    stat_updates: Vec<StatUpdate>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Gradients of a scalar loss with respect to every node that needs them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter, or `None` if the loss does not reach it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    /// Adds parameter gradients into the store's accumulators. Unreachable
    /// parameters are left untouched (i.e. receive zero).
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            kink_signature: FNV_OFFSET,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Hash of every branch decision taken by non-smooth primitives (ReLU
    /// signs, active kernel influences, segment argmaxes). Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    #[inline]
    fn mix(&mut self, v: u64) {
        self.kink_signature = (self.kink_signature ^ v).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free input that receives gradients but is not a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.param_leaves.insert(id, v);
        v
    }

    /// Fails if the value of `v` contains NaN or infinity.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_owned()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Adds a 1×C row to every row of an N×C tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", ta, tr));
        }
        let mut out = ta.clone();
        let bias = tr.data();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        let ng = self.any_grad(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let rows = self.value(*first).rows();
        for p in parts {
            if self.value(*p).rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), self.value(*p)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        let ng = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let ng = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let mut sig = self.kink_signature;
        for v in out.data_mut() {
            let on = *v > 0.0;
            sig = (sig ^ on as u64).wrapping_mul(FNV_PRIME);
            if !on {
                *v = 0.0;
            }
        }
        self.kink_signature = sig;
        let ng = self.any_grad(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row `i` of the output is row `index[i]` of the input.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {} rows",
                t.rows()
            )));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(index.len(), cols, data)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::GatherRows(a, index), ng))
    }

    fn check_segments(&self, op: &'static str, a: Var, seg: &Segments) -> Result<()> {
        let t = self.value(a);
        if seg.total() != t.rows() {
            return Err(Error::Shape {
                op,
                left: t.shape(),
                right: (seg.total(), seg.len()),
            });
        }
        Ok(())
    }

    /// Sums the rows of each segment, in row order. Empty segments give zeros.
    pub fn segment_sum(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments("segment_sum", a, &seg)?;
        let t = self.value(a);
        let mut out = Tensor::zeros(seg.len(), t.cols());
        for s in 0..seg.len() {
            for r in seg.range(s) {
                for (o, v) in out.row_mut(s).iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, seg), ng))
    }

    /// Columnwise max over each segment. Ties keep the first row; empty
    /// segments give zeros.
    pub fn segment_max(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments("segment_max", a, &seg)?;
        let t = self.value(a);
        let cols = t.cols();
        let mut out = Tensor::zeros(seg.len(), cols);
        let mut argmax = vec![usize::MAX; seg.len() * cols];
        for s in 0..seg.len() {
            let range = seg.range(s);
            if range.is_empty() {
                continue;
            }
            for c in 0..cols {
                let mut best = range.start;
                for r in range.clone() {
                    if t.get(r, c) > t.get(best, c) {
                        best = r;
                    }
                }
                out.set(s, c, t.get(best, c));
                argmax[s * cols + c] = best;
            }
        }
        for &i in &argmax {
            self.mix(i as u64);
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::SegmentMax(a, seg, argmax), ng))
    }

    /// Mean of the rows of each segment. Empty segments give zeros.
    pub fn segment_mean(&mut self, a: Var, seg: Arc<Segments>) -> Result<Var> {
        self.check_segments("segment_mean", a, &seg)?;
        let t = self.value(a);
        let mut out = Tensor::zeros(seg.len(), t.cols());
        for s in 0..seg.len() {
            let range = seg.range(s);
            if range.is_empty() {
                continue;
            }
            let inv = 1.0 / range.len() as f64;
            for r in range {
                for (o, v) in out.row_mut(s).iter_mut().zip(t.row(r)) {
                    *o += v;
                }
            }
            for o in out.row_mut(s) {
                *o *= inv;
            }
        }
        let ng = self.any_grad(&[a]);
        Ok(self.push(out, Op::SegmentMean(a, seg), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn frobenius_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).frobenius_sq();
        let ng = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::FrobeniusSq(a), ng)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let z = self.value(logits);
        if labels.len() != z.rows() || z.rows() == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: z.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z.cols()) {
            return Err(Error::invalid(format!(
                "softmax_cross_entropy: label {bad} out of range for {} classes",
                z.cols()
            )));
        }
        let mut probs = Tensor::zeros(z.rows(), z.cols());
        let mut loss = 0.0;
        for r in 0..z.rows() {
            let row = z.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - m).exp();
                denom += *p;
            }
            for p in probs.row_mut(r) {
                *p /= denom;
            }
            loss += -(row[labels[r]] - m - denom.ln());
        }
        loss /= z.rows() as f64;
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            },
            ng,
        ))
    }

    /// Per-column normalization. In train mode statistics come from the rows
    /// of `x` (biased variance) and are returned; in eval mode the given
    /// running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
        mode: NormMode,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let tx = self.value(x);
        let (n, c) = tx.shape();
        for p in [gamma, beta] {
            let tp = self.value(p);
            if tp.shape() != (1, c) {
                return Err(shape_err("batch_norm", tx, tp));
            }
        }
        if running_mean.shape() != (1, c) || running_var.shape() != (1, c) {
            return Err(shape_err("batch_norm", tx, running_mean));
        }
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n == 0 {
                    return Err(Error::invalid("batch_norm: empty batch in train mode"));
                }
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(tx.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean.clone(), var.clone(), Some((mean, var)))
            }
            NormMode::Eval => (
                running_mean.data().to_vec(),
                running_var.data().to_vec(),
                None,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(n, c);
        let mut out = Tensor::zeros(n, c);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for r in 0..n {
            for j in 0..c {
                let h = (tx.get(r, j) - mean[j]) * inv_std[j];
                xhat.set(r, j, h);
                out.set(r, j, g[j] * h + b[j]);
            }
        }
        let ng = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// For each row: `y_j = R_jᵀ d` where `R_j` is the j-th row-major 3×3
    /// block of `frames` (width 9J) and `d` the row of `offsets` (width 3).
    pub fn frame_transpose_apply(&mut self, frames: Var, offsets: Arc<Tensor>) -> Result<Var> {
        let tf = self.value(frames);
        if tf.cols() % 9 != 0 || offsets.cols() != 3 || offsets.rows() != tf.rows() {
            return Err(shape_err("frame_transpose_apply", tf, &offsets));
        }
        let j_count = tf.cols() / 9;
        let mut out = Tensor::zeros(tf.rows(), 3 * j_count);
        for p in 0..tf.rows() {
            let fr = tf.row(p);
            let d = offsets.row(p);
            let o = out.row_mut(p);
            for j in 0..j_count {
                let m = &fr[9 * j..9 * j + 9];
                for c in 0..3 {
                    o[3 * j + c] = m[c] * d[0] + m[3 + c] * d[1] + m[6 + c] * d[2];
                }
            }
        }
        let ng = self.any_grad(&[frames]);
        Ok(self.push(out, Op::FrameTransposeApply(frames, offsets), ng))
    }

    /// Blockwise `A_jᵀ B_j` for row-packed frame stacks of equal shape.
    pub fn relative_frames(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.cols() % 9 != 0 {
            return Err(shape_err("relative_frames", ta, tb));
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for p in 0..ta.rows() {
            let (ra, rb) = (ta.row(p), tb.row(p));
            let o = out.row_mut(p);
            for j in (0..ra.len()).step_by(9) {
                let (ma, mb) = (&ra[j..j + 9], &rb[j..j + 9]);
                for r in 0..3 {
                    for c in 0..3 {
                        o[j + 3 * r + c] =
                            ma[r] * mb[c] + ma[3 + r] * mb[3 + c] + ma[6 + r] * mb[6 + c];
                    }
                }
            }
        }
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::RelativeFrames(a, b), ng))
    }

    /// Blockwise `A_j U_j` for row-packed frame stacks of equal shape.
    pub fn compose_frames(&mut self, a: Var, u: Var) -> Result<Var> {
        let (ta, tu) = (self.value(a), self.value(u));
        if ta.shape() != tu.shape() || ta.cols() % 9 != 0 {
            return Err(shape_err("compose_frames", ta, tu));
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        for p in 0..ta.rows() {
            let (ra, ru) = (ta.row(p), tu.row(p));
            let o = out.row_mut(p);
            for j in (0..ra.len()).step_by(9) {
                mat3_mul(&ra[j..j + 9], &ru[j..j + 9], &mut o[j..j + 9]);
            }
        }
        let ng = self.any_grad(&[a, u]);
        Ok(self.push(out, Op::ComposeFrames(a, u), ng))
    }

    /// `Σ_rows Σ_j ‖I − U_j U_jᵀ‖²_F` over row-packed 3×3 blocks.
    pub fn ortho_loss(&mut self, u: Var) -> Result<Var> {
        let tu = self.value(u);
        if tu.cols() % 9 != 0 {
            return Err(Error::Shape {
                op: "ortho_loss",
                left: tu.shape(),
                right: (tu.rows(), 9),
            });
        }
        let mut total = 0.0;
        for p in 0..tu.rows() {
            let row = tu.row(p);
            for j in (0..row.len()).step_by(9) {
                let m = gram_minus_identity(&row[j..j + 9]);
                total += m.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let ng = self.any_grad(&[u]);
        Ok(self.push(Tensor::scalar(total), Op::OrthoLoss(u), ng))
    }

    /// Linear kernel influence `max(0, 1 − ‖y_j − x̃_k‖/σ)` for every aligned
    /// offset `y_j` (input width 3J) and kernel point; output column `j·K + k`.
    pub fn kernel_influence(&mut self, y: Var, kernel: Arc<[[f64; 3]]>, sigma: f64) -> Result<Var> {
        let ty = self.value(y);
        if ty.cols() % 3 != 0 || sigma <= 0.0 {
            return Err(Error::invalid(format!(
                "kernel_influence: width {} is not a multiple of 3 or sigma {sigma} <= 0",
                ty.cols()
            )));
        }
        let (j_count, k_count) = (ty.cols() / 3, kernel.len());
        let mut out = Tensor::zeros(ty.rows(), j_count * k_count);
        let mut sig = self.kink_signature;
        for p in 0..ty.rows() {
            let row = ty.row(p);
            let o = out.row_mut(p);
            for j in 0..j_count {
                let yj = &row[3 * j..3 * j + 3];
                for (k, kp) in kernel.iter().enumerate() {
                    let d = dist3(yj, kp);
                    let on = d < sigma;
                    sig = (sig ^ on as u64).wrapping_mul(FNV_PRIME);
                    if on {
                        o[j * k_count + k] = 1.0 - d / sigma;
                    }
                }
            }
        }
        self.kink_signature = sig;
        let ng = self.any_grad(&[y]);
        Ok(self.push(out, Op::Influence { y, kernel, sigma }, ng))
    }

    /// Per query segment, aggregates features onto kernel points under each
    /// alignment: output column `k·(J·C) + j·C + c` holds
    /// `Σ_{p ∈ segment} h[p, j·K + k] · f[p, c]`.
    pub fn kernel_aggregate(
        &mut self,
        h: Var,
        f: Var,
        segments: Arc<Segments>,
        kernel_count: usize,
    ) -> Result<Var> {
        let (th, tf) = (self.value(h), self.value(f));
        if th.rows() != tf.rows()
            || kernel_count == 0
            || th.cols() % kernel_count != 0
            || segments.total() != th.rows()
        {
            return Err(shape_err("kernel_aggregate", th, tf));
        }
        let frame_count = th.cols() / kernel_count;
        let c = tf.cols();
        let width = kernel_count * frame_count * c;
        let mut out = Tensor::zeros(segments.len(), width);
        for s in 0..segments.len() {
            let o = out.row_mut(s);
            for p in segments.range(s) {
                let hr = th.row(p);
                let fr = tf.row(p);
                for j in 0..frame_count {
                    for k in 0..kernel_count {
                        let w = hr[j * kernel_count + k];
                        if w == 0.0 {
                            continue;
                        }
                        let base = k * frame_count * c + j * c;
                        for (ov, fv) in o[base..base + c].iter_mut().zip(fr) {
                            *ov += w * fv;
                        }
                    }
                }
            }
        }
        let ng = self.any_grad(&[h, f]);
        Ok(self.push(
            out,
            Op::KernelAggregate {
                h,
                f,
                segments,
                kernel_count,
                frame_count,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape.0, shape.1));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        let mut params: Vec<(ParamId, Var)> =
            self.param_leaves.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.nodes[v.0].value.shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.acc(grads, *a, |ga| {
                    matmul_a_bt_into(g.data(), tb.data(), ga.data_mut(), m, n, k)
                });
                self.acc(grads, *b, |gb| {
                    matmul_at_b_into(ta.data(), g.data(), gb.data_mut(), m, k, n)
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |ga| {
                    for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += s * v;
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.acc(grads, *p, |gp| {
                        for r in 0..g.rows() {
                            for (o, v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[c0..c0 + w]) {
                                *o += v;
                            }
                        }
                    });
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for p in parts {
                    let (rows, cols) = self.value(*p).shape();
                    self.acc(grads, *p, |gp| {
                        let src = &g.data()[r0 * cols..(r0 + rows) * cols];
                        for (o, v) in gp.data_mut().iter_mut().zip(src) {
                            *o += v;
                        }
                    });
                    r0 += rows;
                }
            }
            Op::Relu(a) => {
                let out = &node.value;
                self.acc(grads, *a, |ga| {
                    for ((o, v), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *y > 0.0 {
                            *o += v;
                        }
                    }
                });
            }
            Op::GatherRows(a, index) => {
                self.acc(grads, *a, |ga| {
                    for (r, &i) in index.iter().enumerate() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SegmentSum(a, seg) => {
                self.acc(grads, *a, |ga| {
                    for s in 0..seg.len() {
                        for r in seg.range(s) {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::SegmentMax(a, _seg, argmax) => {
                let cols = g.cols();
                self.acc(grads, *a, |ga| {
                    for (i, &r) in argmax.iter().enumerate() {
                        if r != usize::MAX {
                            let (s, c) = (i / cols, i % cols);
                            let cur = ga.get(r, c);
                            ga.set(r, c, cur + g.get(s, c));
                        }
                    }
                });
            }
            Op::SegmentMean(a, seg) => {
                self.acc(grads, *a, |ga| {
                    for s in 0..seg.len() {
                        let range = seg.range(s);
                        if range.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / range.len() as f64;
                        for r in range {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(s)) {
                                *o += inv * v;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                self.acc(grads, *a, |ga| ga.data_mut().iter_mut().for_each(|o| *o += s));
            }
            Op::FrobeniusSq(a) => {
                let s = 2.0 * g.item();
                let ta = self.value(*a);
                self.acc(grads, *a, |ga| {
                    for (o, v) in ga.data_mut().iter_mut().zip(ta.data()) {
                        *o += s * v;
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = g.item() / probs.rows() as f64;
                self.acc(grads, *logits, |gl| {
                    for r in 0..probs.rows() {
                        let o = gl.row_mut(r);
                        for (c, p) in probs.row(r).iter().enumerate() {
                            let t = if c == labels[r] { 1.0 } else { 0.0 };
                            o[c] += s * (p - t);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (n, c) = g.shape();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        sum_g[j] += g.get(r, j);
                        sum_gx[j] += g.get(r, j) * xhat.get(r, j);
                    }
                }
                self.acc(grads, *beta, |gb| {
                    for (o, v) in gb.data_mut().iter_mut().zip(&sum_g) {
                        *o += v;
                    }
                });
                self.acc(grads, *gamma, |gg| {
                    for (o, v) in gg.data_mut().iter_mut().zip(&sum_gx) {
                        *o += v;
                    }
                });
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, |gx| match mode {
                    NormMode::Eval => {
                        for r in 0..n {
                            for j in 0..c {
                                let cur = gx.get(r, j);
                                gx.set(r, j, cur + gam[j] * inv_std[j] * g.get(r, j));
                            }
                        }
                    }
                    NormMode::Train => {
                        let nf = n as f64;
                        for r in 0..n {
                            for j in 0..c {
                                let d = gam[j] * inv_std[j] / nf
                                    * (nf * g.get(r, j) - sum_g[j] - xhat.get(r, j) * sum_gx[j]);
                                let cur = gx.get(r, j);
                                gx.set(r, j, cur + d);
                            }
                        }
                    }
                });
            }
            Op::FrameTransposeApply(frames, offsets) => {
                self.acc(grads, *frames, |gf| {
                    let j_count = gf.cols() / 9;
                    for p in 0..gf.rows() {
                        let d = offsets.row(p);
                        let gr = g.row(p);
                        let o = gf.row_mut(p);
                        for j in 0..j_count {
                            for r in 0..3 {
                                for c in 0..3 {
                                    o[9 * j + 3 * r + c] += gr[3 * j + c] * d[r];
                                }
                            }
                        }
                    }
                });
            }
            Op::RelativeFrames(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                // out = AᵀB: dA = B Gᵀ, dB = A G
                self.acc(grads, *a, |ga| {
                    for p in 0..g.rows() {
                        let (rb, gr) = (tb.row(p), g.row(p));
                        let o = ga.row_mut(p);
                        for j in (0..gr.len()).step_by(9) {
                            let mut tmp = [0.0; 9];
                            mat3_mul_bt(&rb[j..j + 9], &gr[j..j + 9], &mut tmp);
                            for (ov, tv) in o[j..j + 9].iter_mut().zip(&tmp) {
                                *ov += tv;
                            }
                        }
                    }
                });
                self.acc(grads, *b, |gb| {
                    for p in 0..g.rows() {
                        let (ra, gr) = (ta.row(p), g.row(p));
                        let o = gb.row_mut(p);
                        for j in (0..gr.len()).step_by(9) {
                            let mut tmp = [0.0; 9];
                            mat3_mul(&ra[j..j + 9], &gr[j..j + 9], &mut tmp);
                            for (ov, tv) in o[j..j + 9].iter_mut().zip(&tmp) {
                                *ov += tv;
                            }
                        }
                    }
                });
            }
            Op::ComposeFrames(a, u) => {
                let (ta, tu) = (self.value(*a), self.value(*u));
                // out = AU: dA = G Uᵀ, dU = Aᵀ G
                self.acc(grads, *a, |ga| {
                    for p in 0..g.rows() {
                        let (ru, gr) = (tu.row(p), g.row(p));
                        let o = ga.row_mut(p);
                        for j in (0..gr.len()).step_by(9) {
                            let mut tmp = [0.0; 9];
                            mat3_mul_bt(&gr[j..j + 9], &ru[j..j + 9], &mut tmp);
                            for (ov, tv) in o[j..j + 9].iter_mut().zip(&tmp) {
                                *ov += tv;
                            }
                        }
                    }
                });
                self.acc(grads, *u, |gu| {
                    for p in 0..g.rows() {
                        let (ra, gr) = (ta.row(p), g.row(p));
                        let o = gu.row_mut(p);
                        for j in (0..gr.len()).step_by(9) {
                            let mut tmp = [0.0; 9];
                            mat3_mul_at(&ra[j..j + 9], &gr[j..j + 9], &mut tmp);
                            for (ov, tv) in o[j..j + 9].iter_mut().zip(&tmp) {
                                *ov += tv;
                            }
                        }
                    }
                });
            }
            Op::OrthoLoss(u) => {
                let s = g.item();
                let tu = self.value(*u);
                // d‖UUᵀ − I‖² / dU = 4 (UUᵀ − I) U
                self.acc(grads, *u, |gu| {
                    for p in 0..tu.rows() {
                        let row = tu.row(p);
                        let o = gu.row_mut(p);
                        for j in (0..row.len()).step_by(9) {
                            let m = gram_minus_identity(&row[j..j + 9]);
                            let mut tmp = [0.0; 9];
                            mat3_mul(&m, &row[j..j + 9], &mut tmp);
                            for (ov, tv) in o[j..j + 9].iter_mut().zip(&tmp) {
                                *ov += 4.0 * s * tv;
                            }
                        }
                    }
                });
            }
            Op::Influence { y, kernel, sigma } => {
                let ty = self.value(*y);
                let k_count = kernel.len();
                self.acc(grads, *y, |gy| {
                    for p in 0..ty.rows() {
                        let row = ty.row(p);
                        let gr = g.row(p);
                        let hr = node.value.row(p);
                        let o = gy.row_mut(p);
                        for j in 0..row.len() / 3 {
                            let yj = &row[3 * j..3 * j + 3];
                            for (k, kp) in kernel.iter().enumerate() {
                                if hr[j * k_count + k] <= 0.0 {
                                    continue;
                                }
                                let d = dist3(yj, kp);
                                if d == 0.0 {
                                    continue;
                                }
                                let coef = -gr[j * k_count + k] / (sigma * d);
                                for c in 0..3 {
                                    o[3 * j + c] += coef * (yj[c] - kp[c]);
                                }
                            }
                        }
                    }
                });
            }
            Op::KernelAggregate {
                h,
                f,
                segments,
                kernel_count,
                frame_count,
            } => {
                let (th, tf) = (self.value(*h), self.value(*f));
                let (kc, jc, c) = (*kernel_count, *frame_count, tf.cols());
                self.acc(grads, *h, |gh| {
                    for s in 0..segments.len() {
                        let gr = g.row(s);
                        for p in segments.range(s) {
                            let fr = tf.row(p);
                            let o = gh.row_mut(p);
                            for j in 0..jc {
                                for k in 0..kc {
                                    let base = k * jc * c + j * c;
                                    let dot: f64 =
                                        gr[base..base + c].iter().zip(fr).map(|(a, b)| a * b).sum();
                                    o[j * kc + k] += dot;
                                }
                            }
                        }
                    }
                });
                self.acc(grads, *f, |gf| {
                    for s in 0..segments.len() {
                        let gr = g.row(s);
                        for p in segments.range(s) {
                            let hr = th.row(p);
                            let o = gf.row_mut(p);
                            for j in 0..jc {
                                for k in 0..kc {
                                    let w = hr[j * kc + k];
                                    if w == 0.0 {
                                        continue;
                                    }
                                    let base = k * jc * c + j * c;
                                    for (ov, gv) in o.iter_mut().zip(&gr[base..base + c]) {
                                        *ov += w * gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn dist3(a: &[f64], b: &[f64; 3]) -> f64 {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// `out = a · b` for row-packed 3×3 matrices.
#[inline]
fn mat3_mul(a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = a[3 * r] * b[c] + a[3 * r + 1] * b[3 + c] + a[3 * r + 2] * b[6 + c];
        }
    }
}

/// `out = aᵀ · b`.
#[inline]
fn mat3_mul_at(a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = a[r] * b[c] + a[3 + r] * b[3 + c] + a[6 + r] * b[6 + c];
        }
    }
}

/// `out = a · bᵀ`.
#[inline]
fn mat3_mul_bt(a: &[f64], b: &[f64], out: &mut [f64]) {
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] =
                a[3 * r] * b[3 * c] + a[3 * r + 1] * b[3 * c + 1] + a[3 * r + 2] * b[3 * c + 2];
        }
    }
}

/// `U Uᵀ − I` for a row-packed 3×3 matrix.
#[inline]
fn gram_minus_identity(u: &[f64]) -> [f64; 9] {
    let mut m = [0.0; 9];
    mat3_mul_bt(u, u, &mut m);
    m[0] -= 1.0;
    m[4] -= 1.0;
    m[8] -= 1.0;
    m
}
