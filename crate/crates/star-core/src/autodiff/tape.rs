//! Reverse-mode autodiff over a linear operation tape.
//!
//! A [`Tape`] records every forward operator into an arena of dense
//! buffers; [`Tape::backward`] replays the record in reverse and leaves
//! an exact gradient on every buffer the loss depends on. Tapes are
//! single-threaded and consumed by one forward/backward pass; parameter
//! snapshots ([`Tensor`]) are cheap to share across tapes.

use std::sync::Arc;

use crate::error::{Result, StarError};
use crate::segmentation::Segmentation;

use super::kernels;

/// Index of a buffer on a tape.
pub type VarId = usize;

/// Dense array with shape metadata. Values are shared copy-on-write so
/// snapshots can be bound to many tapes without copying.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&s| s == 0) {
            return Err(StarError::InvalidArgument(format!(
                "tensor shape {shape:?} has a zero axis"
            )));
        }
        if numel != values.len() {
            return Err(StarError::shape(
                "tensor",
                format!("shape {:?} wants {} values, got {}", shape, numel, values.len()),
            ));
        }
        Ok(Tensor { shape, data: Arc::new(values) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![0.0; numel]) }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![v]) }
    }

    pub fn row_matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view; clones the storage only if it is aliased by a tape.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[self.shape.len() - 1]
        }
    }

    fn shared(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

/// How the second operand of an elementwise op lines up with the first.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    /// One value broadcast everywhere.
    Scalar,
    /// Shape matches the trailing axes; repeated over leading rows.
    Trailing(usize),
}

#[derive(Clone, Debug)]
enum Op {
    Matmul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    MatmulNT { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    Add { a: VarId, b: VarId, bc: Broadcast },
    Mul { a: VarId, b: VarId, bc: Broadcast },
    Scale { x: VarId, c: f64 },
    AddConst { x: VarId },
    Recip { x: VarId },
    Sigmoid { x: VarId },
    Relu { x: VarId },
    SoftmaxLast { x: VarId, cols: usize },
    LayerNormLast { x: VarId, cols: usize },
    EmbedLookup { table: VarId, ids: Vec<u32>, vocab: usize, dim: usize },
    CrossEntropy { logits: VarId, targets: Vec<u32>, pad: Option<u32>, cols: usize },
    ConcatRows { parts: Vec<VarId>, rows: Vec<usize>, cols: usize },
    ConcatCols { parts: Vec<VarId>, cols: Vec<usize>, rows: usize },
    SliceCols { x: VarId, start: usize, len: usize, cols: usize, rows: usize },
    GatherRows { x: VarId, idx: Vec<usize>, cols: usize, rows: usize },
    MaskAdd { x: VarId },
    SumAll { x: VarId },
    Reshape { x: VarId },
    CifAggregate { alpha: VarId, h: VarId, seg: Segmentation, weights: Vec<f64> },
    Conv1d {
        x: VarId,
        w: VarId,
        b: VarId,
        t: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    },
}

struct Slot {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    from_op: Option<usize>,
}

/// Records forward operators and replays them in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    ops: Vec<Op>,
    /// Output slot of each op, aligned with `ops`.
    outputs: Vec<VarId>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Bind a tensor as a leaf (input or parameter snapshot).
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(t.shape.clone(), t.shared(), None)
    }

    pub fn leaf_vec(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<VarId> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    fn push(&mut self, shape: Vec<usize>, data: Arc<Vec<f64>>, from_op: Option<usize>) -> VarId {
        self.slots.push(Slot { shape, data, from_op });
        self.grads.push(None);
        self.slots.len() - 1
    }

    fn out(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> VarId {
        self.ops.push(op);
        let op_idx = self.ops.len() - 1;
        let id = self.push(shape, Arc::new(values), Some(op_idx));
        self.outputs.push(id);
        id
    }

    pub fn value(&self, id: VarId) -> &[f64] {
        &self.slots[id].data
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.slots[id].shape
    }

    pub fn numel(&self, id: VarId) -> usize {
        self.slots[id].data.len()
    }

    /// Detach the value of a variable as an owned tensor.
    pub fn tensor(&self, id: VarId) -> Tensor {
        Tensor { shape: self.slots[id].shape.clone(), data: Arc::clone(&self.slots[id].data) }
    }

    fn dims2(&self, id: VarId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(StarError::shape(op, format!("expected matrix, got shape {s:?}"))),
        }
    }

    // ── forward operators ───────────────────────────────────────────

    /// C = A @ B.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(StarError::shape(
                "matmul",
                format!("{:?} @ {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let vals = kernels::matmul(self.value(a), self.value(b), m, ka, n);
        Ok(self.out(vec![m, n], vals, Op::Matmul { a, b, m, k: ka, n }))
    }

    /// C = A @ B^T.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.dims2(a, "matmul_nt")?;
        let (n, kb) = self.dims2(b, "matmul_nt")?;
        if ka != kb {
            return Err(StarError::shape(
                "matmul_nt",
                format!("{:?} @ {:?}^T", self.shape(a), self.shape(b)),
            ));
        }
        let vals = kernels::matmul_nt(self.value(a), self.value(b), m, ka, n);
        Ok(self.out(vec![m, n], vals, Op::MatmulNT { a, b, m, k: ka, n }))
    }

    fn broadcast_of(&self, a: VarId, b: VarId, op: &'static str) -> Result<Broadcast> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            Ok(Broadcast::Same)
        } else if self.numel(b) == 1 {
            Ok(Broadcast::Scalar)
        } else if sa.len() > sb.len() && sa.ends_with(sb) {
            Ok(Broadcast::Trailing(self.numel(b)))
        } else {
            Err(StarError::shape(op, format!("{sa:?} vs {sb:?} (trailing-axis broadcast only)")))
        }
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let bc = self.broadcast_of(a, b, "add")?;
        let bv = self.value(b);
        let vals = match bc {
            Broadcast::Same => {
                self.value(a).iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
            }
            Broadcast::Scalar => {
                let c = bv[0];
                self.value(a).iter().map(|x| x + c).collect()
            }
            Broadcast::Trailing(n) => self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[i % n])
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.out(shape, vals, Op::Add { a, b, bc }))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let bc = self.broadcast_of(a, b, "mul")?;
        let bv = self.value(b);
        let vals = match bc {
            Broadcast::Same => {
                self.value(a).iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
            }
            Broadcast::Scalar => {
                let c = bv[0];
                self.value(a).iter().map(|x| x * c).collect()
            }
            Broadcast::Trailing(n) => self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, x)| x * bv[i % n])
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        Ok(self.out(shape, vals, Op::Mul { a, b, bc }))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let vals = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.out(shape, vals, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: VarId, c: f64) -> VarId {
        let vals = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.out(shape, vals, Op::AddConst { x })
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, x: VarId) -> VarId {
        let vals = self.value(x).iter().map(|v| 1.0 / v).collect();
        let shape = self.shape(x).to_vec();
        self.out(shape, vals, Op::Recip { x })
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let vals = self.value(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.out(shape, vals, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let vals = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.out(shape, vals, Op::Relu { x })
    }

    /// Softmax over the last axis.
    pub fn softmax_last_axis(&mut self, x: VarId) -> Result<VarId> {
        let (_, cols) = self.dims2(x, "softmax")?;
        let mut vals = self.value(x).to_vec();
        kernels::softmax_rows(&mut vals, cols);
        let shape = self.shape(x).to_vec();
        Ok(self.out(shape, vals, Op::SoftmaxLast { x, cols }))
    }

    /// Layer normalization over the last axis, without affine terms.
    pub fn layernorm(&mut self, x: VarId) -> Result<VarId> {
        let (_, cols) = self.dims2(x, "layernorm")?;
        let mut vals = self.value(x).to_vec();
        kernels::layernorm_rows(&mut vals, cols);
        let shape = self.shape(x).to_vec();
        Ok(self.out(shape, vals, Op::LayerNormLast { x, cols }))
    }

    /// Rows of an embedding table selected by token id.
    pub fn embed_lookup(&mut self, table: VarId, ids: &[u32]) -> Result<VarId> {
        let (vocab, dim) = self.dims2(table, "embed-lookup")?;
        if ids.is_empty() {
            return Err(StarError::InvalidArgument("embed-lookup of empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(StarError::InvalidArgument(format!(
                "token id {bad} out of vocabulary {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut vals = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            vals.extend_from_slice(&tv[i as usize * dim..(i as usize + 1) * dim]);
        }
        Ok(self.out(
            vec![ids.len(), dim],
            vals,
            Op::EmbedLookup { table, ids: ids.to_vec(), vocab, dim },
        ))
    }

    /// Summed token-level negative log-likelihood; rows whose target is
    /// `pad` are excluded.
    pub fn cross_entropy(&mut self, logits: VarId, targets: &[u32], pad: Option<u32>) -> Result<VarId> {
        let (rows, cols) = self.dims2(logits, "cross-entropy")?;
        if targets.len() != rows {
            return Err(StarError::shape(
                "cross-entropy",
                format!("{} logit rows vs {} targets", rows, targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cols && Some(t) != pad) {
            return Err(StarError::InvalidArgument(format!(
                "target id {bad} out of vocabulary {cols}"
            )));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if Some(t) == pad {
                continue;
            }
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        Ok(self.out(
            vec![1],
            vec![total],
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad, cols },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(StarError::InvalidArgument("concat of zero parts".into()));
        }
        let (_, cols) = self.dims2(parts[0], "concat")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut vals = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if c != cols {
                return Err(StarError::shape(
                    "concat",
                    format!("column mismatch: {} vs {}", cols, c),
                ));
            }
            rows.push(r);
            vals.extend_from_slice(self.value(p));
        }
        let total: usize = rows.iter().sum();
        Ok(self.out(vec![total, cols], vals, Op::ConcatRows { parts: parts.to_vec(), rows, cols }))
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(StarError::InvalidArgument("concat of zero parts".into()));
        }
        let (rows, _) = self.dims2(parts[0], "concat")?;
        let mut cols = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat")?;
            if r != rows {
                return Err(StarError::shape("concat", format!("row mismatch: {} vs {}", rows, r)));
            }
            cols.push(c);
        }
        let total: usize = cols.iter().sum();
        let mut vals = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(cols.iter()) {
            let pv = self.value(p);
            for r in 0..rows {
                vals[r * total + off..r * total + off + c].copy_from_slice(&pv[r * c..(r + 1) * c]);
            }
            off += c;
        }
        Ok(self.out(vec![rows, total], vals, Op::ConcatCols { parts: parts.to_vec(), cols, rows }))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "slice-cols")?;
        if start + len > cols {
            return Err(StarError::shape(
                "slice-cols",
                format!("slice {start}..{} of {cols} columns", start + len),
            ));
        }
        let xv = self.value(x);
        let mut vals = Vec::with_capacity(rows * len);
        for r in 0..rows {
            vals.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        Ok(self.out(vec![rows, len], vals, Op::SliceCols { x, start, len, cols, rows }))
    }

    pub fn gather_rows(&mut self, x: VarId, idx: &[usize]) -> Result<VarId> {
        let (rows, cols) = self.dims2(x, "gather-rows")?;
        if idx.is_empty() {
            return Err(StarError::InvalidArgument("gather of zero rows".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(StarError::shape("gather-rows", format!("row {bad} out of {rows}")));
        }
        let xv = self.value(x);
        let mut vals = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            vals.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        Ok(self.out(vec![idx.len(), cols], vals, Op::GatherRows { x, idx: idx.to_vec(), cols, rows }))
    }

    /// Additive attention masking: hidden positions get -1e9.
    pub fn mask_add(&mut self, x: VarId, visible: &[bool]) -> Result<VarId> {
        if visible.len() != self.numel(x) {
            return Err(StarError::shape(
                "mask-add",
                format!("mask of {} entries vs tensor {:?}", visible.len(), self.shape(x)),
            ));
        }
        let vals = self
            .value(x)
            .iter()
            .zip(visible.iter())
            .map(|(v, &ok)| if ok { *v } else { v - MASK_NEG })
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.out(shape, vals, Op::MaskAdd { x }))
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let total = self.value(x).iter().sum();
        self.out(vec![1], vec![total], Op::SumAll { x })
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.numel(x) {
            return Err(StarError::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = Arc::clone(&self.slots[x].data);
        self.ops.push(Op::Reshape { x });
        let op_idx = self.ops.len() - 1;
        let id = self.push(shape, data, Some(op_idx));
        self.outputs.push(id);
        Ok(id)
    }

    /// Continuous integrate-and-fire aggregation: per-segment weighted
    /// sums of `h` rows with weights derived from `alpha` and the fixed
    /// segmentation. Gradients flow to both `alpha` and `h`.
    pub fn cif_aggregate(&mut self, alpha: VarId, h: VarId, seg: &Segmentation) -> Result<VarId> {
        let (rows, cols) = self.dims2(h, "cif-aggregate")?;
        if self.numel(alpha) != rows {
            return Err(StarError::shape(
                "cif-aggregate",
                format!("{} gates vs {} rows", self.numel(alpha), rows),
            ));
        }
        if seg.frames != rows {
            return Err(StarError::shape(
                "cif-aggregate",
                format!("segmentation over {} frames vs {} rows", seg.frames, rows),
            ));
        }
        if seg.boundaries.is_empty() {
            return Err(StarError::InvalidArgument("cif-aggregate with no boundaries".into()));
        }
        let weights = seg.weight_matrix();
        let vals = kernels::matmul(&weights, self.value(h), seg.boundaries.len(), rows, cols);
        Ok(self.out(
            vec![seg.boundaries.len(), cols],
            vals,
            Op::CifAggregate { alpha, h, seg: seg.clone(), weights },
        ))
    }

    /// Strided 1-D convolution over time with symmetric zero padding.
    pub fn conv1d(&mut self, x: VarId, w: VarId, b: VarId, kernel: usize, stride: usize) -> Result<VarId> {
        let (t, c_in) = self.dims2(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != kernel || ws[1] != c_in {
            return Err(StarError::shape(
                "conv1d",
                format!("weight {ws:?} vs kernel {kernel} over {c_in} channels"),
            ));
        }
        let c_out = ws[2];
        if self.numel(b) != c_out {
            return Err(StarError::shape(
                "conv1d",
                format!("bias of {} vs {} output channels", self.numel(b), c_out),
            ));
        }
        if t < kernel {
            return Err(StarError::InvalidArgument(format!(
                "conv1d input of {t} frames shorter than kernel {kernel}"
            )));
        }
        let vals = kernels::conv1d(self.value(x), self.value(w), self.value(b), t, c_in, c_out, kernel, stride);
        let out_len = vals.len() / c_out;
        Ok(self.out(
            vec![out_len, c_out],
            vals,
            Op::Conv1d { x, w, b, t, c_in, c_out, kernel, stride },
        ))
    }

    // ── reverse pass ────────────────────────────────────────────────

    /// Seed the scalar `loss` with gradient 1 and propagate to all leaves.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.backward_done {
            return Err(StarError::Tape("backward already ran on this tape".into()));
        }
        if self.numel(loss) != 1 {
            return Err(StarError::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.slots[loss].from_op.is_none() {
            return Err(StarError::Tape("loss is detached: no recorded op produces it".into()));
        }
        self.backward_done = true;
        self.grads[loss] = Some(vec![1.0]);
        for i in (0..self.ops.len()).rev() {
            self.backward_op(i);
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. a buffer, if any flowed.
    pub fn grad(&self, id: VarId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    fn accum(&mut self, id: VarId, add: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, ai) in g.iter_mut().zip(add.iter()) {
                    *gi += ai;
                }
            }
            None => self.grads[id] = Some(add.to_vec()),
        }
    }

    fn backward_op(&mut self, op_idx: usize) {
        let out = self.outputs[op_idx];
        let Some(d_out) = self.grads[out].clone() else { return };
        let op = self.ops[op_idx].clone();
        match op {
            Op::Matmul { a, b, m, k, n } => {
                // dA = dC @ B^T, dB = A^T @ dC
                let d_a = kernels::matmul_nt(&d_out, self.value(b), m, n, k);
                self.accum(a, &d_a);
                let av = self.value(a);
                let mut d_b = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        let d_row = &d_out[i * n..(i + 1) * n];
                        let b_row = &mut d_b[p * n..(p + 1) * n];
                        for (bv, dv) in b_row.iter_mut().zip(d_row.iter()) {
                            *bv += x * dv;
                        }
                    }
                }
                self.accum(b, &d_b);
            }
            Op::MatmulNT { a, b, m, k, n } => {
                // C = A @ B^T: dA = dC @ B, dB = dC^T @ A
                let d_a = kernels::matmul(&d_out, self.value(b), m, n, k);
                self.accum(a, &d_a);
                let av = self.value(a);
                let mut d_b = vec![0.0; n * k];
                for i in 0..m {
                    let a_row = &av[i * k..(i + 1) * k];
                    for j in 0..n {
                        let d = d_out[i * n + j];
                        if d == 0.0 {
                            continue;
                        }
                        let b_row = &mut d_b[j * k..(j + 1) * k];
                        for (bv, &avv) in b_row.iter_mut().zip(a_row.iter()) {
                            *bv += d * avv;
                        }
                    }
                }
                self.accum(b, &d_b);
            }
            Op::Add { a, b, bc } => {
                self.accum(a, &d_out);
                let d_b = reduce_broadcast(&d_out, bc, self.numel(b));
                self.accum(b, &d_b);
            }
            Op::Mul { a, b, bc } => {
                let bv = self.value(b);
                let d_a: Vec<f64> = match bc {
                    Broadcast::Same => d_out.iter().zip(bv.iter()).map(|(d, y)| d * y).collect(),
                    Broadcast::Scalar => d_out.iter().map(|d| d * bv[0]).collect(),
                    Broadcast::Trailing(nb) => {
                        d_out.iter().enumerate().map(|(i, d)| d * bv[i % nb]).collect()
                    }
                };
                let av = self.value(a);
                let prod: Vec<f64> = d_out.iter().zip(av.iter()).map(|(d, x)| d * x).collect();
                let d_b = reduce_broadcast(&prod, bc, self.numel(b));
                self.accum(a, &d_a);
                self.accum(b, &d_b);
            }
            Op::Scale { x, c } => {
                let d: Vec<f64> = d_out.iter().map(|v| v * c).collect();
                self.accum(x, &d);
            }
            Op::AddConst { x } => self.accum(x, &d_out),
            Op::Recip { x } => {
                let ov = self.value(out);
                let d: Vec<f64> = d_out.iter().zip(ov.iter()).map(|(d, o)| -d * o * o).collect();
                self.accum(x, &d);
            }
            Op::Sigmoid { x } => {
                let ov = self.value(out);
                let d: Vec<f64> =
                    d_out.iter().zip(ov.iter()).map(|(d, o)| d * o * (1.0 - o)).collect();
                self.accum(x, &d);
            }
            Op::Relu { x } => {
                let xv = self.value(x);
                let d: Vec<f64> = d_out
                    .iter()
                    .zip(xv.iter())
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(x, &d);
            }
            Op::SoftmaxLast { x, cols } => {
                let p = self.value(out);
                let mut d = vec![0.0; d_out.len()];
                for r in 0..d_out.len() / cols {
                    let base = r * cols;
                    let dot: f64 =
                        (0..cols).map(|c| d_out[base + c] * p[base + c]).sum();
                    for c in 0..cols {
                        d[base + c] = p[base + c] * (d_out[base + c] - dot);
                    }
                }
                self.accum(x, &d);
            }
            Op::LayerNormLast { x, cols } => {
                let y = self.value(out);
                let xv = self.value(x);
                let n = cols as f64;
                let mut d = vec![0.0; d_out.len()];
                for r in 0..d_out.len() / cols {
                    let base = r * cols;
                    let row_x = &xv[base..base + cols];
                    let mean = row_x.iter().sum::<f64>() / n;
                    let var =
                        row_x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + kernels::LAYERNORM_EPS).sqrt();
                    let mean_dy = d_out[base..base + cols].iter().sum::<f64>() / n;
                    let mean_dy_y: f64 = (0..cols)
                        .map(|c| d_out[base + c] * y[base + c])
                        .sum::<f64>()
                        / n;
                    for c in 0..cols {
                        d[base + c] =
                            inv * (d_out[base + c] - mean_dy - y[base + c] * mean_dy_y);
                    }
                }
                self.accum(x, &d);
            }
            Op::EmbedLookup { table, ids, vocab, dim } => {
                let mut d = vec![0.0; vocab * dim];
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut d[i as usize * dim..(i as usize + 1) * dim];
                    for (dv, sv) in dst.iter_mut().zip(&d_out[r * dim..(r + 1) * dim]) {
                        *dv += sv;
                    }
                }
                self.accum(table, &d);
            }
            Op::CrossEntropy { logits, targets, pad, cols } => {
                let lv = self.value(logits);
                let scale = d_out[0];
                let mut d = vec![0.0; lv.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == pad {
                        continue;
                    }
                    let row = &lv[r * cols..(r + 1) * cols];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    let d_row = &mut d[r * cols..(r + 1) * cols];
                    for (c, e) in exps.iter().enumerate() {
                        d_row[c] = scale * (e / sum);
                    }
                    d_row[t as usize] -= scale;
                }
                self.accum(logits, &d);
            }
            Op::ConcatRows { parts, rows, cols } => {
                let mut off = 0;
                for (&p, &r) in parts.iter().zip(rows.iter()) {
                    self.accum(p, &d_out[off..off + r * cols]);
                    off += r * cols;
                }
            }
            Op::ConcatCols { parts, cols, rows } => {
                let total: usize = cols.iter().sum();
                let mut off = 0;
                for (&p, &c) in parts.iter().zip(cols.iter()) {
                    let mut d = vec![0.0; rows * c];
                    for r in 0..rows {
                        d[r * c..(r + 1) * c]
                            .copy_from_slice(&d_out[r * total + off..r * total + off + c]);
                    }
                    self.accum(p, &d);
                    off += c;
                }
            }
            Op::SliceCols { x, start, len, cols, rows } => {
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&d_out[r * len..(r + 1) * len]);
                }
                self.accum(x, &d);
            }
            Op::GatherRows { x, idx, cols, rows } => {
                let mut d = vec![0.0; rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut d[i * cols..(i + 1) * cols];
                    for (dv, sv) in dst.iter_mut().zip(&d_out[r * cols..(r + 1) * cols]) {
                        *dv += sv;
                    }
                }
                self.accum(x, &d);
            }
            Op::MaskAdd { x } => self.accum(x, &d_out),
            Op::SumAll { x } => {
                let d = vec![d_out[0]; self.numel(x)];
                self.accum(x, &d);
            }
            Op::Reshape { x } => self.accum(x, &d_out),
            Op::CifAggregate { alpha, h, seg, weights } => {
                let (t, cols) = (seg.frames, self.numel(h) / seg.frames);
                let n = seg.boundaries.len();
                // dH = W^T @ dC
                let hv = self.value(h).to_vec();
                let mut d_h = vec![0.0; t * cols];
                for m in 0..n {
                    for tt in 0..t {
                        let w = weights[m * t + tt];
                        if w == 0.0 {
                            continue;
                        }
                        let src = &d_out[m * cols..(m + 1) * cols];
                        let dst = &mut d_h[tt * cols..(tt + 1) * cols];
                        for (dv, sv) in dst.iter_mut().zip(src.iter()) {
                            *dv += w * sv;
                        }
                    }
                }
                self.accum(h, &d_h);
                // d_alpha via the linear structure of the weights: boundary
                // left weights depend on all earlier gates with -1, right
                // residuals with +1, interior weights are the gates.
                let g = |m: usize, tt: usize| -> f64 {
                    kernels::dot(&d_out[m * cols..(m + 1) * cols], &hv[tt * cols..(tt + 1) * cols])
                };
                let mut d_alpha = vec![0.0; t];
                let mut range = vec![0.0; t + 1]; // difference array for prefix adds
                let mut prev_frame: Option<usize> = None;
                for (m, b) in seg.boundaries.iter().enumerate() {
                    let start = prev_frame.map_or(0, |p| p + 1);
                    for tt in start..b.frame {
                        d_alpha[tt] += g(m, tt);
                    }
                    if let Some(p) = prev_frame {
                        // right residual of the previous boundary: +1 on gates 0..=p
                        let gr = g(m, p);
                        range[0] += gr;
                        range[p + 1] -= gr;
                    }
                    let gl = g(m, b.frame);
                    if b.tail {
                        d_alpha[b.frame] += gl;
                    } else if b.frame > 0 {
                        // left split: beta minus everything accumulated before
                        range[0] -= gl;
                        range[b.frame] += gl;
                    }
                    prev_frame = Some(b.frame);
                }
                let mut run = 0.0;
                for tt in 0..t {
                    run += range[tt];
                    d_alpha[tt] += run;
                }
                self.accum(alpha, &d_alpha);
            }
            Op::Conv1d { x, w, b, t, c_in, c_out, kernel, stride } => {
                let (pad_left, out_len) = kernels::conv1d_pad(t, kernel, stride);
                let xv = self.value(x);
                let wv = self.value(w);
                let mut d_x = vec![0.0; t * c_in];
                let mut d_w = vec![0.0; kernel * c_in * c_out];
                let mut d_b = vec![0.0; c_out];
                for o in 0..out_len {
                    let d_row = &d_out[o * c_out..(o + 1) * c_out];
                    for (bv, dv) in d_b.iter_mut().zip(d_row.iter()) {
                        *bv += dv;
                    }
                    for j in 0..kernel {
                        let pos = (o * stride + j) as isize - pad_left as isize;
                        if pos < 0 || pos >= t as isize {
                            continue;
                        }
                        let pos = pos as usize;
                        for ci in 0..c_in {
                            let xval = xv[pos * c_in + ci];
                            let w_row = &wv[j * c_in * c_out + ci * c_out..];
                            let dw_row = &mut d_w[j * c_in * c_out + ci * c_out
                                ..j * c_in * c_out + (ci + 1) * c_out];
                            let mut dx_acc = 0.0;
                            for co in 0..c_out {
                                let d = d_row[co];
                                dx_acc += d * w_row[co];
                                dw_row[co] += d * xval;
                            }
                            d_x[pos * c_in + ci] += dx_acc;
                        }
                    }
                }
                self.accum(x, &d_x);
                self.accum(w, &d_w);
                self.accum(b, &d_b);
            }
        }
    }
}

/// Masked logits get this subtracted before softmax.
pub const MASK_NEG: f64 = 1e9;

fn reduce_broadcast(d: &[f64], bc: Broadcast, numel_b: usize) -> Vec<f64> {
    match bc {
        Broadcast::Same => d.to_vec(),
        Broadcast::Scalar => vec![d.iter().sum()],
        Broadcast::Trailing(n) => {
            debug_assert_eq!(n, numel_b);
            let mut out = vec![0.0; n];
            for (i, v) in d.iter().enumerate() {
                out[i % n] += v;
            }
            out
        }
    }
}
