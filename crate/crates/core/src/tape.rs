//! Reverse-mode automatic differentiation over recorded tensor operations.
//!
//! A `Tape` records every operation of one forward pass together with its
//! operand references and forward value. `backward` replays the record in
//! reverse, pushing vector-Jacobian products into per-node accumulators.
//! Leaf and parameter accumulators survive; intermediate accumulators are
//! dropped as soon as their node has been processed, which keeps the peak
//! memory at roughly the size of the forward values.
//!
//! Sparsified graphs thread their nonzero structure through the ops that
//! consume them (`sym_norm`, `graph_matmul`, `l1_diff`), so both the
//! forward passes and the vector-Jacobian products touch only the entries
//! that can reach a parameter: everything outside a top-k support is
//! discarded by the top-k mask before it could matter.
//!
//! Evaluation is single threaded and every reduction runs in a fixed order,
//! so identical inputs produce bit-identical losses and gradients.

use std::rc::Rc;

use crate::blas;
use crate::error::{Error, Result};
use crate::fastmath;
use crate::graph::{select_topk, HopSupports, TopkPool};
use crate::tensor::Tensor;

/// Epsilon inside the cross-entropy log, guards confident wrong predictions.
pub const CE_EPSILON: f64 = 1e-12;

type SupportLists = Rc<Vec<Vec<u32>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a graph-operand gradient is materialized.
enum GraphGrad {
    /// Operand is a constant leaf: no gradient needed.
    Skip,
    /// Operand is a support-masked graph: only these entries can matter.
    Support(SupportLists),
    /// Anything else: dense gradient.
    Dense,
}

enum Op {
    Leaf,
    Param,
    Matmul { a: NodeId, b: NodeId },
    /// out = Z * Z^T
    SymGram { z: NodeId },
    /// Elementwise binary; `broadcast` means b is 1 x cols applied per row.
    Add { a: NodeId, b: NodeId, broadcast: bool },
    Sub { a: NodeId, b: NodeId, broadcast: bool },
    Mul { a: NodeId, b: NodeId, broadcast: bool },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Abs { x: NodeId },
    RowSoftmax { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SumAll { x: NodeId },
    Reshape { x: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    /// out = v[idx] * mat, idx into v's flat storage.
    ScaleByEntry { mat: NodeId, v: NodeId, idx: usize },
    /// rows x cols matrix assembled from scalar (1x1) nodes, row-major.
    AssembleScalars { entries: Vec<NodeId> },
    /// Per row: clamp negatives to zero, keep the k largest, zero the rest.
    /// `kept` lists the selected columns whose input was strictly positive.
    TopK { x: NodeId, kept: SupportLists },
    /// D^{-1/2} (A + I) D^{-1/2} with D_ii = 1 + row sum. `u` caches
    /// D^{-1/2}; `out_support` is the nonzero structure of the output
    /// (input support plus the diagonal). When the input is itself a
    /// support-masked node, `input_kept` restricts the gradient to it.
    SymNorm { a: NodeId, u: Vec<f64>, out_support: SupportLists, input_kept: Option<SupportLists> },
    /// Sparse-aware product out = g * x over the rows of g's support.
    GraphMatmul { g: NodeId, x: NodeId, rows: SupportLists, grad: GraphGrad },
    /// Hop-weight mix M with M_ij = sum_h H^h_ij v[h] + Htilde_ij v[K].
    HopMix { v: NodeId, hops: Rc<HopSupports> },
    /// Fused relation-graph sparsifier straight from the concatenated
    /// features: top-k of row_softmax(Z Z^T) ⊙ HopMix(v). `exps` caches the
    /// unnormalized softmax numerators and `inv` the row normalizers.
    RelationGraph {
        z: NodeId,
        v: NodeId,
        hops: Rc<HopSupports>,
        exps: Tensor,
        inv: Vec<f64>,
        kept: SupportLists,
    },
    /// Fused top-k of Z Z^T, computed in row blocks so the dense Gram
    /// matrix is never stored; the backward pass runs over the kept
    /// entries only.
    GramTopK { z: NodeId, kept: SupportLists },
    /// -sum_{i in mask} sum_c y_ic ln(p_ic + eps), scalar output.
    MaskedCrossEntropy { p: NodeId, y: Tensor, mask: Vec<usize> },
    /// sum |a - b|, scalar output, sign subgradient (0 at ties). When both
    /// operands carry a known support the sum runs over its union.
    L1Diff { a: NodeId, b: NodeId, union: Option<Vec<Vec<u32>>> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient accumulators left after a backward pass: leaf and parameter
/// nodes only, intermediates are freed eagerly.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, zeros when the loss never reached it.
    pub fn get_or_zeros(&self, id: NodeId, rows: usize, cols: usize) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        crate::runtime::init();
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Nonzero structure of a support-masked node (top-k outputs and
    /// normalized graphs); `None` for everything else.
    pub fn masked_support(&self, id: NodeId) -> Option<SupportLists> {
        match &self.nodes[id.0].op {
            Op::TopK { kept, .. } => Some(Rc::clone(kept)),
            Op::RelationGraph { kept, .. } => Some(Rc::clone(kept)),
            Op::GramTopK { kept, .. } => Some(Rc::clone(kept)),
            Op::SymNorm { out_support, .. } => Some(Rc::clone(out_support)),
            _ => None,
        }
    }

    fn is_constant(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A leaf flagged trainable; its accumulator is preserved by `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Param)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let vb = self.value(b);
        let value = va.matmul(vb)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// z * z^T in one step; the backward pass uses (G + G^T) z.
    pub fn sym_gram(&mut self, z: NodeId) -> NodeId {
        let value = self.value(z).gram();
        self.push(value, Op::SymGram { z })
    }

    fn binary_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<bool> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.same_shape(vb) {
            Ok(false)
        } else if vb.rows() == 1 && vb.cols() == va.cols() {
            Ok(true)
        } else {
            Err(Error::ShapeMismatch {
                op,
                left_rows: va.rows(),
                left_cols: va.cols(),
                right_rows: vb.rows(),
                right_cols: vb.cols(),
            })
        }
    }

    fn binary(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(bool) -> Op,
    ) -> Result<NodeId> {
        let broadcast = self.binary_shape(opname, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = va.clone();
        if broadcast {
            let brow = vb.row(0);
            for i in 0..out.rows() {
                for (v, &bv) in out.row_mut(i).iter_mut().zip(brow) {
                    *v = f(*v, bv);
                }
            }
        } else {
            for (v, &bv) in out.values_mut().iter_mut().zip(vb.values()) {
                *v = f(*v, bv);
            }
        }
        Ok(self.push(out, make(broadcast)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, |broadcast| Op::Add { a, b, broadcast })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", a, b, |x, y| x - y, |broadcast| Op::Sub { a, b, broadcast })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, |broadcast| Op::Mul { a, b, broadcast })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(fastmath::sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs { x })
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).row_softmax()?;
        Ok(self.push(value, Op::RowSoftmax { x }))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(value, Op::ConcatCols { a, b }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]).unwrap(), Op::SumAll { x })
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(x);
        if v.len() != rows * cols {
            return Err(Error::InvalidDimension {
                op: "reshape",
                expected: format!("{} values", rows * cols),
                got: format!("{}x{}", v.rows(), v.cols()),
            });
        }
        let value = Tensor::from_vec(rows, cols, v.values().to_vec()).unwrap();
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Flatten to a single row.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let len = self.value(x).len();
        self.reshape(x, 1, len).expect("flatten preserves length")
    }

    pub fn scale_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).scale(c);
        self.push(value, Op::ScaleConst { x, c })
    }

    pub fn scale_by_entry(&mut self, mat: NodeId, v: NodeId, idx: usize) -> Result<NodeId> {
        let vv = self.value(v);
        if idx >= vv.len() {
            return Err(Error::invalid(format!(
                "scale_by_entry: index {idx} out of bounds for {} entries",
                vv.len()
            )));
        }
        let s = vv.values()[idx];
        let value = self.value(mat).scale(s);
        Ok(self.push(value, Op::ScaleByEntry { mat, v, idx }))
    }

    pub fn assemble_scalars(&mut self, entries: &[NodeId], rows: usize, cols: usize) -> Result<NodeId> {
        if entries.len() != rows * cols {
            return Err(Error::invalid(format!(
                "assemble_scalars: {} entries for a {rows}x{cols} matrix",
                entries.len()
            )));
        }
        let mut data = Vec::with_capacity(entries.len());
        for &e in entries {
            let v = self.value(e);
            if v.len() != 1 {
                return Err(Error::invalid("assemble_scalars: every entry must be scalar"));
            }
            data.push(v.values()[0]);
        }
        let value = Tensor::from_vec(rows, cols, data).unwrap();
        Ok(self.push(value, Op::AssembleScalars { entries: entries.to_vec() }))
    }

    /// Clamp negatives to zero, then keep the k largest entries per row.
    /// Ties break toward the lower column index. k >= cols keeps everything.
    pub fn topk_rows(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::invalid("topk_rows: k must be >= 1"));
        }
        let v = self.value(x);
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = Tensor::zeros(rows, cols);
        let mut kept = Vec::with_capacity(rows);
        let mut pool = TopkPool::new();
        for i in 0..rows {
            let row = v.row(i);
            let mut sel = select_topk(row, k, &mut pool);
            let out_row = out.row_mut(i);
            // keep gradient support only where the input was positive
            sel.retain(|&j| {
                let raw = row[j as usize];
                if raw > 0.0 {
                    out_row[j as usize] = raw;
                    true
                } else {
                    false
                }
            });
            kept.push(sel);
        }
        Ok(self.push(out, Op::TopK { x, kept: Rc::new(kept) }))
    }

    /// D^{-1/2} (A + I) D^{-1/2}, D_ii = 1 + sum_j A_ij. Requires A >= 0.
    pub fn sym_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let input_kept = self.masked_support(a);
        let v = self.value(a);
        if v.rows() != v.cols() {
            return Err(Error::InvalidDimension {
                op: "sym_norm",
                expected: "square matrix".into(),
                got: format!("{}x{}", v.rows(), v.cols()),
            });
        }
        let n = v.rows();
        let mut u = Vec::with_capacity(n);
        let mut out_support: Vec<Vec<u32>> = Vec::with_capacity(n);
        match &input_kept {
            Some(lists) => {
                // masked producers guarantee nonnegative entries
                for i in 0..n {
                    let row = v.row(i);
                    let mut s = 0.0;
                    for &j in &lists[i] {
                        s += row[j as usize];
                    }
                    u.push(1.0 / (1.0 + s).sqrt());
                    let mut sup = lists[i].clone();
                    if let Err(pos) = sup.binary_search(&(i as u32)) {
                        sup.insert(pos, i as u32);
                    }
                    out_support.push(sup);
                }
            }
            None => {
                for i in 0..n {
                    let mut s = 0.0;
                    let mut sup = Vec::new();
                    for (j, &x) in v.row(i).iter().enumerate() {
                        if x < 0.0 {
                            return Err(Error::invalid(format!(
                                "sym_norm: negative entry {x} at ({i},{j}); clamp before normalizing"
                            )));
                        }
                        if x != 0.0 || j == i {
                            sup.push(j as u32);
                        }
                        s += x;
                    }
                    u.push(1.0 / (1.0 + s).sqrt());
                    out_support.push(sup);
                }
            }
        }
        let mut out = Tensor::zeros(n, n);
        for i in 0..n {
            let ui = u[i];
            let src = v.row(i);
            let dst = out.row_mut(i);
            for &j in &out_support[i] {
                let j = j as usize;
                let b = src[j] + if i == j { 1.0 } else { 0.0 };
                dst[j] = ui * b * u[j];
            }
        }
        Ok(self.push(
            out,
            Op::SymNorm { a, u, out_support: Rc::new(out_support), input_kept },
        ))
    }

    /// Product g * x over the nonzero rows of the graph g. The gradient
    /// w.r.t. g is skipped for constant leaves and restricted to the output
    /// support for `sym_norm` graphs (exact: entries outside it never reach
    /// a parameter).
    pub fn graph_matmul(&mut self, g: NodeId, x: NodeId) -> Result<NodeId> {
        let gv = self.value(g);
        let xv = self.value(x);
        if gv.cols() != xv.rows() {
            return Err(Error::ShapeMismatch {
                op: "graph_matmul",
                left_rows: gv.rows(),
                left_cols: gv.cols(),
                right_rows: xv.rows(),
                right_cols: xv.cols(),
            });
        }
        let n = gv.rows();
        let f = xv.cols();
        let rows: SupportLists = match self.masked_support(g) {
            Some(lists) => lists,
            None => Rc::new(
                (0..n)
                    .map(|i| {
                        gv.row(i)
                            .iter()
                            .enumerate()
                            .filter(|(_, &v)| v != 0.0)
                            .map(|(j, _)| j as u32)
                            .collect()
                    })
                    .collect(),
            ),
        };
        let grad = if self.is_constant(g) {
            GraphGrad::Skip
        } else if matches!(self.nodes[g.0].op, Op::SymNorm { .. }) {
            GraphGrad::Support(Rc::clone(&rows))
        } else {
            GraphGrad::Dense
        };
        let mut out = Tensor::zeros(n, f);
        for i in 0..n {
            let gr = gv.row(i);
            let dst = out.row_mut(i);
            for &j in &rows[i] {
                let w = gr[j as usize];
                if w == 0.0 {
                    continue;
                }
                for (d, &xvv) in dst.iter_mut().zip(xv.row(j as usize)) {
                    *d += w * xvv;
                }
            }
        }
        Ok(self.push(out, Op::GraphMatmul { g, x, rows, grad }))
    }

    /// M_ij = sum_h H^h_ij v[h] + Htilde_ij v[K] for hop supports of the
    /// carried graph. `v` must be 1 x (K+1).
    pub fn hop_mix(&mut self, v: NodeId, hops: &Rc<HopSupports>) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.len() != hops.k_hops() + 1 {
            return Err(Error::InvalidDimension {
                op: "hop_mix",
                expected: format!("{} hop weights", hops.k_hops() + 1),
                got: format!("{}", vv.len()),
            });
        }
        let value = hop_mix_dense(vv.values(), hops);
        Ok(self.push(value, Op::HopMix { v, hops: Rc::clone(hops) }))
    }

    /// Fused relation graph: per-row top-k of
    /// row_softmax(Z Z^T) ⊙ hop_mix(v) recorded as one operation.
    pub fn relation_graph_topk(
        &mut self,
        z: NodeId,
        v: NodeId,
        hops: &Rc<HopSupports>,
        k: usize,
    ) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::invalid("relation_graph_topk: k must be >= 1"));
        }
        let zv = self.value(z);
        let n = hops.len();
        if zv.rows() != n {
            return Err(Error::InvalidDimension {
                op: "relation_graph_topk",
                expected: format!("{n} feature rows"),
                got: format!("{}", zv.rows()),
            });
        }
        let vv = self.value(v);
        if vv.len() != hops.k_hops() + 1 {
            return Err(Error::InvalidDimension {
                op: "relation_graph_topk",
                expected: format!("{} hop weights", hops.k_hops() + 1),
                got: format!("{}", vv.len()),
            });
        }
        let weights = vv.values().to_vec();
        let mut exps = zv.gram();
        let mut inv = Vec::with_capacity(n);
        let mut out = Tensor::zeros(n, n);
        let mut kept = Vec::with_capacity(n);
        let mut m_row = vec![0.0f64; n];
        let mut pool = TopkPool::new();
        for i in 0..n {
            let row = exps.row_mut(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            for x in row.iter_mut() {
                *x -= max;
            }
            let sum = fastmath::exp_slice_sum(row);
            let ri = 1.0 / sum;
            inv.push(ri);
            hops.fill_mix_row(i, &weights, &mut m_row);
            // row normalizer is positive, so ranking the unnormalized
            // products selects the same entries
            let sel = select_topk_product(row, &m_row, k, &mut pool);
            let out_row = out.row_mut(i);
            for &j in &sel {
                out_row[j as usize] = row[j as usize] * ri * m_row[j as usize];
            }
            kept.push(sel);
        }
        Ok(self.push(
            out,
            Op::RelationGraph { z, v, hops: Rc::clone(hops), exps, inv, kept: Rc::new(kept) },
        ))
    }

    /// Fused topk_rows(Z Z^T, k) without materializing the Gram matrix:
    /// rows are produced in blocks, sparsified, and dropped.
    pub fn gram_topk(&mut self, z: NodeId, k: usize) -> Result<NodeId> {
        if k == 0 {
            return Err(Error::invalid("gram_topk: k must be >= 1"));
        }
        let zv = self.value(z);
        let n = zv.rows();
        let f = zv.cols();
        let block = 256.min(n.max(1));
        let mut scratch = vec![0.0f64; block * n];
        let mut out = Tensor::zeros(n, n);
        let mut kept = Vec::with_capacity(n);
        let mut pool = TopkPool::new();
        let mut r0 = 0;
        while r0 < n {
            let r1 = (r0 + block).min(n);
            let rows = r1 - r0;
            blas::gemm(
                &mut scratch[..rows * n],
                rows,
                n,
                f,
                &zv.values()[r0 * f..r1 * f],
                false,
                zv.values(),
                true,
                0.0,
            );
            for local in 0..rows {
                let row = &scratch[local * n..(local + 1) * n];
                let mut sel = select_topk(row, k, &mut pool);
                let out_row = out.row_mut(r0 + local);
                sel.retain(|&j| {
                    let raw = row[j as usize];
                    if raw > 0.0 {
                        out_row[j as usize] = raw;
                        true
                    } else {
                        false
                    }
                });
                kept.push(sel);
            }
            r0 = r1;
        }
        Ok(self.push(out, Op::GramTopK { z, kept: Rc::new(kept) }))
    }

    /// Masked cross-entropy between row distributions `p` and one-hot `y`.
    pub fn masked_cross_entropy(&mut self, p: NodeId, y: &Tensor, mask: &[usize]) -> Result<NodeId> {
        let pv = self.value(p);
        if !pv.same_shape(y) {
            return Err(Error::ShapeMismatch {
                op: "masked_cross_entropy",
                left_rows: pv.rows(),
                left_cols: pv.cols(),
                right_rows: y.rows(),
                right_cols: y.cols(),
            });
        }
        if mask.is_empty() {
            return Err(Error::EmptyMask("masked_cross_entropy needs at least one supervised row"));
        }
        if let Some(&bad) = mask.iter().find(|&&i| i >= pv.rows()) {
            return Err(Error::invalid(format!(
                "masked_cross_entropy: mask row {bad} out of range for {} rows",
                pv.rows()
            )));
        }
        let mut loss = 0.0;
        for &i in mask {
            for (pc, yc) in pv.row(i).iter().zip(y.row(i)) {
                if *yc != 0.0 {
                    loss -= yc * (pc + CE_EPSILON).ln();
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(1, 1, vec![loss]).unwrap(),
            Op::MaskedCrossEntropy { p, y: y.clone(), mask: mask.to_vec() },
        ))
    }

    /// sum |a - b| with the sign subgradient (zero on ties).
    pub fn l1_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let union: Option<Vec<Vec<u32>>> = match (self.masked_support(a), self.masked_support(b)) {
            (Some(sa), Some(sb)) => {
                Some(sa.iter().zip(sb.iter()).map(|(x, y)| merge_sorted(x, y)).collect())
            }
            _ => None,
        };
        let va = self.value(a);
        let vb = self.value(b);
        if !va.same_shape(vb) {
            return Err(Error::ShapeMismatch {
                op: "l1_diff",
                left_rows: va.rows(),
                left_cols: va.cols(),
                right_rows: vb.rows(),
                right_cols: vb.cols(),
            });
        }
        let mut s = 0.0;
        match &union {
            Some(lists) => {
                for (i, cols) in lists.iter().enumerate() {
                    let ra = va.row(i);
                    let rb = vb.row(i);
                    for &j in cols {
                        s += (ra[j as usize] - rb[j as usize]).abs();
                    }
                }
            }
            None => {
                for (x, y) in va.values().iter().zip(vb.values()) {
                    s += (x - y).abs();
                }
            }
        }
        Ok(self.push(Tensor::from_vec(1, 1, vec![s]).unwrap(), Op::L1Diff { a, b, union }))
    }

    /// Support of a normalized-graph node, for carrying its structure into
    /// the next iteration without rescanning the dense matrix.
    pub fn graph_support(&self, id: NodeId) -> Option<SupportLists> {
        self.masked_support(id)
    }

    /// Reverse sweep from a scalar loss. Returns accumulators for leaf and
    /// parameter nodes; unreachable ones stay `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidDimension {
                op: "backward",
                expected: "scalar (1x1) loss".into(),
                got: format!("{}x{}", lv.rows(), lv.cols()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_vec(1, 1, vec![1.0]).unwrap());

        let mut scratch = Vec::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_op(idx, &g, &mut grads, &mut scratch);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
        scratch: &mut Vec<f64>,
    ) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Matmul { a, b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if !self.is_constant(*a) {
                    // dA = G * B^T
                    let da = ensure(grads, *a, va.rows(), va.cols());
                    blas::gemm(
                        da.values_mut(),
                        va.rows(),
                        va.cols(),
                        vb.cols(),
                        g.values(),
                        false,
                        vb.values(),
                        true,
                        1.0,
                    );
                }
                if !self.is_constant(*b) {
                    // dB = A^T * G
                    let db = ensure(grads, *b, vb.rows(), vb.cols());
                    blas::gemm(
                        db.values_mut(),
                        vb.rows(),
                        vb.cols(),
                        va.rows(),
                        va.values(),
                        true,
                        g.values(),
                        false,
                        1.0,
                    );
                }
            }
            Op::SymGram { z } => {
                if self.is_constant(*z) {
                    return;
                }
                let vz = self.value(*z);
                let n = vz.rows();
                let gsym = reuse_scratch(scratch, n * n);
                sym_add_transposed(g.values(), gsym, n);
                let dz = ensure(grads, *z, vz.rows(), vz.cols());
                blas::gemm(dz.values_mut(), n, vz.cols(), n, gsym, false, vz.values(), false, 1.0);
            }
            Op::Add { a, b, broadcast } => {
                if !self.is_constant(*a) {
                    accumulate(grads, *a, g, self.value(*a));
                }
                if !self.is_constant(*b) {
                    self.accumulate_maybe_broadcast(grads, *b, g, *broadcast, 1.0);
                }
            }
            Op::Sub { a, b, broadcast } => {
                if !self.is_constant(*a) {
                    accumulate(grads, *a, g, self.value(*a));
                }
                if !self.is_constant(*b) {
                    self.accumulate_maybe_broadcast(grads, *b, g, *broadcast, -1.0);
                }
            }
            Op::Mul { a, b, broadcast } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if !self.is_constant(*a) {
                    // dA = G ⊙ B (B broadcast per row when flagged)
                    let da = ensure(grads, *a, va.rows(), va.cols());
                    if *broadcast {
                        let brow = vb.row(0);
                        for i in 0..va.rows() {
                            for ((d, &gv), &bv) in
                                da.row_mut(i).iter_mut().zip(g.row(i)).zip(brow)
                            {
                                *d += gv * bv;
                            }
                        }
                    } else {
                        for ((d, &gv), &bv) in
                            da.values_mut().iter_mut().zip(g.values()).zip(vb.values())
                        {
                            *d += gv * bv;
                        }
                    }
                }
                if !self.is_constant(*b) {
                    // dB = G ⊙ A, column-summed when broadcast
                    let db = ensure(grads, *b, vb.rows(), vb.cols());
                    if *broadcast {
                        for i in 0..va.rows() {
                            for ((d, &gv), &av) in
                                db.row_mut(0).iter_mut().zip(g.row(i)).zip(va.row(i))
                            {
                                *d += gv * av;
                            }
                        }
                    } else {
                        for ((d, &gv), &av) in
                            db.values_mut().iter_mut().zip(g.values()).zip(va.values())
                        {
                            *d += gv * av;
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.is_constant(*x) {
                    return;
                }
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for ((d, &gv), &xv) in dx.values_mut().iter_mut().zip(g.values()).zip(vx.values())
                {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sigmoid { x } => {
                if self.is_constant(*x) {
                    return;
                }
                let out = &node.value;
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for ((d, &gv), &ov) in dx.values_mut().iter_mut().zip(g.values()).zip(out.values())
                {
                    *d += gv * ov * (1.0 - ov);
                }
            }
            Op::Abs { x } => {
                if self.is_constant(*x) {
                    return;
                }
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for ((d, &gv), &xv) in dx.values_mut().iter_mut().zip(g.values()).zip(vx.values())
                {
                    *d += gv * sign0(xv);
                }
            }
            Op::RowSoftmax { x } => {
                if self.is_constant(*x) {
                    return;
                }
                let s = &node.value;
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for i in 0..s.rows() {
                    let srow = s.row(i);
                    let grow = g.row(i);
                    let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for ((d, &sv), &gv) in dx.row_mut(i).iter_mut().zip(srow).zip(grow) {
                        *d += sv * (gv - dot);
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).cols();
                if !self.is_constant(*a) {
                    let va = self.value(*a);
                    let da = ensure(grads, *a, va.rows(), va.cols());
                    for i in 0..va.rows() {
                        for (d, &gv) in da.row_mut(i).iter_mut().zip(&g.row(i)[..ca]) {
                            *d += gv;
                        }
                    }
                }
                if !self.is_constant(*b) {
                    let vb = self.value(*b);
                    let db = ensure(grads, *b, vb.rows(), vb.cols());
                    for i in 0..vb.rows() {
                        for (d, &gv) in db.row_mut(i).iter_mut().zip(&g.row(i)[ca..]) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if self.is_constant(*x) {
                    return;
                }
                let gv = g.values()[0];
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for d in dx.values_mut() {
                    *d += gv;
                }
            }
            Op::Reshape { x } => {
                if self.is_constant(*x) {
                    return;
                }
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for (d, &gv) in dx.values_mut().iter_mut().zip(g.values()) {
                    *d += gv;
                }
            }
            Op::ScaleConst { x, c } => {
                if self.is_constant(*x) {
                    return;
                }
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for (d, &gv) in dx.values_mut().iter_mut().zip(g.values()) {
                    *d += c * gv;
                }
            }
            Op::ScaleByEntry { mat, v, idx } => {
                let vm = self.value(*mat);
                let vv = self.value(*v);
                let s = vv.values()[*idx];
                if !self.is_constant(*mat) {
                    let dm = ensure(grads, *mat, vm.rows(), vm.cols());
                    for (d, &gv) in dm.values_mut().iter_mut().zip(g.values()) {
                        *d += s * gv;
                    }
                }
                if !self.is_constant(*v) {
                    let mut dot = 0.0;
                    for (&gv, &mvv) in g.values().iter().zip(vm.values()) {
                        dot += gv * mvv;
                    }
                    let dv = ensure(grads, *v, vv.rows(), vv.cols());
                    dv.values_mut()[*idx] += dot;
                }
            }
            Op::AssembleScalars { entries } => {
                for (pos, &e) in entries.iter().enumerate() {
                    if self.is_constant(e) {
                        continue;
                    }
                    let de = ensure(grads, e, 1, 1);
                    de.values_mut()[0] += g.values()[pos];
                }
            }
            Op::TopK { x, kept } => {
                if self.is_constant(*x) {
                    return;
                }
                let vx = self.value(*x);
                let dx = ensure(grads, *x, vx.rows(), vx.cols());
                for (i, cols) in kept.iter().enumerate() {
                    let grow = g.row(i);
                    let drow = dx.row_mut(i);
                    for &j in cols {
                        drow[j as usize] += grow[j as usize];
                    }
                }
            }
            Op::SymNorm { a, u, out_support, input_kept } => {
                if self.is_constant(*a) {
                    return;
                }
                let va = self.value(*a);
                let n = va.rows();
                // r_x + c_x accumulated over the support of B = A + I
                let mut rc = vec![0.0f64; n];
                for i in 0..n {
                    let arow = va.row(i);
                    let grow = g.row(i);
                    let mut r = 0.0;
                    for &j in &out_support[i] {
                        let j = j as usize;
                        let b = arow[j] + if i == j { 1.0 } else { 0.0 };
                        if b != 0.0 {
                            let w = grow[j] * b;
                            r += w * u[j];
                            rc[j] += w * u[i];
                        }
                    }
                    rc[i] += r;
                }
                let dx = ensure(grads, *a, n, n);
                match input_kept {
                    // entries outside the producer's kept set are discarded
                    // by its own top-k mask, so only these writes can matter
                    Some(lists) => {
                        for (i, cols) in lists.iter().enumerate() {
                            let coef = -0.5 * u[i] * u[i] * u[i] * rc[i];
                            let grow = g.row(i);
                            let drow = dx.row_mut(i);
                            for &j in cols {
                                let j = j as usize;
                                drow[j] += grow[j] * u[i] * u[j] + coef;
                            }
                        }
                    }
                    None => {
                        for i in 0..n {
                            let coef = -0.5 * u[i] * u[i] * u[i] * rc[i];
                            let grow = g.row(i);
                            for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                                *d += grow[j] * u[i] * u[j] + coef;
                            }
                        }
                    }
                }
            }
            Op::GraphMatmul { g: gn, x, rows, grad } => {
                let gv = self.value(*gn);
                let xv = self.value(*x);
                if !self.is_constant(*x) {
                    // dX += g^T G
                    let dx = ensure(grads, *x, xv.rows(), xv.cols());
                    for (i, cols) in rows.iter().enumerate() {
                        let grow = g.row(i);
                        let grrow = gv.row(i);
                        for &j in cols {
                            let w = grrow[j as usize];
                            if w == 0.0 {
                                continue;
                            }
                            for (d, &gvv) in dx.row_mut(j as usize).iter_mut().zip(grow) {
                                *d += w * gvv;
                            }
                        }
                    }
                }
                match grad {
                    GraphGrad::Skip => {}
                    GraphGrad::Support(lists) => {
                        let dg = ensure(grads, *gn, gv.rows(), gv.cols());
                        for (i, cols) in lists.iter().enumerate() {
                            let grow = g.row(i);
                            let drow = dg.row_mut(i);
                            for &j in cols {
                                let xrow = xv.row(j as usize);
                                let mut dot = 0.0;
                                for (&gvv, &xvv) in grow.iter().zip(xrow) {
                                    dot += gvv * xvv;
                                }
                                drow[j as usize] += dot;
                            }
                        }
                    }
                    GraphGrad::Dense => {
                        // dG = G_out * X^T
                        let dg = ensure(grads, *gn, gv.rows(), gv.cols());
                        blas::gemm(
                            dg.values_mut(),
                            gv.rows(),
                            gv.cols(),
                            xv.cols(),
                            g.values(),
                            false,
                            xv.values(),
                            true,
                            1.0,
                        );
                    }
                }
            }
            Op::HopMix { v, hops } => {
                if self.is_constant(*v) {
                    return;
                }
                let kh = hops.k_hops();
                let dv = ensure(grads, *v, 1, kh + 1);
                let dv = dv.values_mut();
                for i in 0..hops.len() {
                    let grow = g.row(i);
                    for h in 0..kh {
                        let mut s = 0.0;
                        for &j in hops.hop_row(h, i) {
                            s += grow[j as usize];
                        }
                        dv[h] += s;
                    }
                    // far weight: everything off-diagonal not reachable
                    let mut far: f64 = grow.iter().sum();
                    far -= grow[i];
                    for &j in hops.reach_row(i) {
                        if j as usize != i {
                            far -= grow[j as usize];
                        }
                    }
                    dv[kh] += far;
                }
            }
            Op::RelationGraph { z, v, hops, exps, inv, kept } => {
                let n = hops.len();
                let kh = hops.k_hops();
                // hop-weight gradient via dM = dA ⊙ S at kept entries
                if !self.is_constant(*v) {
                    let dv_t = ensure(grads, *v, 1, kh + 1);
                    let dv = dv_t.values_mut();
                    for (i, cols) in kept.iter().enumerate() {
                        let grow = g.row(i);
                        let erow = exps.row(i);
                        let ri = inv[i];
                        for &j in cols {
                            let j = j as usize;
                            let dm = grow[j] * erow[j] * ri;
                            let mut reached = false;
                            for h in 0..kh {
                                if hops.hop_contains(h, i, j) {
                                    dv[h] += dm;
                                    reached = true;
                                }
                            }
                            if !reached && !hops.reach_contains(i, j) && i != j {
                                dv[kh] += dm;
                            }
                        }
                    }
                }
                if self.is_constant(*z) {
                    return;
                }
                let weights = self.value(*v).values();
                // softmax VJP into a dense scratch, then dZ += (dX + dX^T) Z
                let (dx, gsym) = reuse_scratch_pair(scratch, n * n);
                for (i, cols) in kept.iter().enumerate() {
                    let grow = g.row(i);
                    let erow = exps.row(i);
                    let ri = inv[i];
                    // dS = dA ⊙ M at kept entries; rowdot = <dS, S>
                    let mut ds = Vec::with_capacity(cols.len());
                    let mut rowdot = 0.0;
                    for &j in cols {
                        let j = j as usize;
                        let m = hop_weight_at(hops, weights, i, j);
                        let d = grow[j] * m;
                        rowdot += d * erow[j] * ri;
                        ds.push(d);
                    }
                    let drow = &mut dx[i * n..(i + 1) * n];
                    for (d, &ev) in drow.iter_mut().zip(erow) {
                        *d = -rowdot * ev * ri;
                    }
                    for (&j, &dsv) in cols.iter().zip(&ds) {
                        drow[j as usize] += erow[j as usize] * ri * dsv;
                    }
                }
                let zv = self.value(*z);
                sym_add_transposed(dx, gsym, n);
                let dz = ensure(grads, *z, zv.rows(), zv.cols());
                blas::gemm(dz.values_mut(), n, zv.cols(), n, gsym, false, zv.values(), false, 1.0);
            }
            Op::GramTopK { z, kept } => {
                if self.is_constant(*z) {
                    return;
                }
                let zv = self.value(*z);
                let f = zv.cols();
                let dz = ensure(grads, *z, zv.rows(), f);
                // dZ = (dA + dA^T) Z over the kept entries only
                for (i, cols) in kept.iter().enumerate() {
                    let grow = g.row(i);
                    for &j in cols {
                        let j = j as usize;
                        let gd = grow[j];
                        if gd == 0.0 {
                            continue;
                        }
                        // split-borrow the two accumulator rows
                        if i == j {
                            let zi = zv.row(i);
                            let di = dz.row_mut(i);
                            for (d, &zz) in di.iter_mut().zip(zi) {
                                *d += 2.0 * gd * zz;
                            }
                        } else {
                            let zi = zv.row(i);
                            let zj = zv.row(j);
                            {
                                let di = dz.row_mut(i);
                                for (d, &zz) in di.iter_mut().zip(zj) {
                                    *d += gd * zz;
                                }
                            }
                            let dj = dz.row_mut(j);
                            for (d, &zz) in dj.iter_mut().zip(zi) {
                                *d += gd * zz;
                            }
                        }
                    }
                }
            }
            Op::MaskedCrossEntropy { p, y, mask } => {
                if self.is_constant(*p) {
                    return;
                }
                let gv = g.values()[0];
                let pv = self.value(*p);
                let dp = ensure(grads, *p, pv.rows(), pv.cols());
                for &i in mask {
                    for ((d, &pc), &yc) in
                        dp.row_mut(i).iter_mut().zip(pv.row(i)).zip(y.row(i))
                    {
                        if yc != 0.0 {
                            *d -= gv * yc / (pc + CE_EPSILON);
                        }
                    }
                }
            }
            Op::L1Diff { a, b, union } => {
                let gv = g.values()[0];
                let va = self.value(*a);
                let vb = self.value(*b);
                match union {
                    Some(lists) => {
                        if !self.is_constant(*a) {
                            let da = ensure(grads, *a, va.rows(), va.cols());
                            for (i, cols) in lists.iter().enumerate() {
                                let ra = va.row(i);
                                let rb = vb.row(i);
                                let drow = da.row_mut(i);
                                for &j in cols {
                                    let j = j as usize;
                                    drow[j] += gv * sign0(ra[j] - rb[j]);
                                }
                            }
                        }
                        if !self.is_constant(*b) {
                            let db = ensure(grads, *b, vb.rows(), vb.cols());
                            for (i, cols) in lists.iter().enumerate() {
                                let ra = va.row(i);
                                let rb = vb.row(i);
                                let drow = db.row_mut(i);
                                for &j in cols {
                                    let j = j as usize;
                                    drow[j] -= gv * sign0(ra[j] - rb[j]);
                                }
                            }
                        }
                    }
                    None => {
                        if !self.is_constant(*a) {
                            let da = ensure(grads, *a, va.rows(), va.cols());
                            for ((d, &x), &y) in
                                da.values_mut().iter_mut().zip(va.values()).zip(vb.values())
                            {
                                *d += gv * sign0(x - y);
                            }
                        }
                        if !self.is_constant(*b) {
                            let db = ensure(grads, *b, vb.rows(), vb.cols());
                            for ((d, &x), &y) in
                                db.values_mut().iter_mut().zip(va.values()).zip(vb.values())
                            {
                                *d -= gv * sign0(x - y);
                            }
                        }
                    }
                }
            }
        }
    }

    fn accumulate_maybe_broadcast(
        &self,
        grads: &mut Vec<Option<Tensor>>,
        id: NodeId,
        g: &Tensor,
        broadcast: bool,
        scale: f64,
    ) {
        let v = self.value(id);
        let d = ensure(grads, id, v.rows(), v.cols());
        if broadcast {
            for i in 0..g.rows() {
                for (dst, &gv) in d.row_mut(0).iter_mut().zip(g.row(i)) {
                    *dst += scale * gv;
                }
            }
        } else {
            for (dst, &gv) in d.values_mut().iter_mut().zip(g.values()) {
                *dst += scale * gv;
            }
        }
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn ensure<'g>(
    grads: &'g mut Vec<Option<Tensor>>,
    id: NodeId,
    rows: usize,
    cols: usize,
) -> &'g mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate(grads: &mut Vec<Option<Tensor>>, id: NodeId, g: &Tensor, shape_like: &Tensor) {
    let d = ensure(grads, id, shape_like.rows(), shape_like.cols());
    for (dst, &gv) in d.values_mut().iter_mut().zip(g.values()) {
        *dst += gv;
    }
}


/// Zero-free scratch reuse: the buffer grows once and every consumer
/// overwrites the region it uses before reading it.
fn reuse_scratch(scratch: &mut Vec<f64>, len: usize) -> &mut [f64] {
    if scratch.len() < len {
        scratch.resize(len, 0.0);
    }
    &mut scratch[..len]
}

fn reuse_scratch_pair(scratch: &mut Vec<f64>, len: usize) -> (&mut [f64], &mut [f64]) {
    if scratch.len() < 2 * len {
        scratch.resize(2 * len, 0.0);
    }
    let (a, b) = scratch.split_at_mut(len);
    (&mut a[..len], &mut b[..len])
}

/// out = G + G^T for square row-major G, the shared backward step of the
/// Gram-style products. Tile-wise so both access patterns stay cached.
fn sym_add_transposed(g: &[f64], out: &mut [f64], n: usize) {
    debug_assert_eq!(g.len(), n * n);
    const TILE: usize = 64;
    for ib in (0..n).step_by(TILE) {
        let iend = (ib + TILE).min(n);
        for jb in (0..n).step_by(TILE) {
            let jend = (jb + TILE).min(n);
            for i in ib..iend {
                let base = i * n;
                for j in jb..jend {
                    out[base + j] = g[base + j] + g[j * n + i];
                }
            }
        }
    }
}

fn merge_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// M_ij for one pair from the hop structure, matching `fill_mix_row`.
fn hop_weight_at(hops: &HopSupports, weights: &[f64], i: usize, j: usize) -> f64 {
    let kh = hops.k_hops();
    let mut m = 0.0;
    let mut reached = false;
    for (h, w) in weights.iter().take(kh).enumerate() {
        if hops.hop_contains(h, i, j) {
            m += w;
            reached = true;
        }
    }
    if !reached && i != j && !hops.reach_contains(i, j) {
        m += weights[kh];
    }
    m
}

/// Top-k over the elementwise product of two rows, without materializing
/// it. Same selection order as `select_topk`.
fn select_topk_product(s: &[f64], m: &[f64], k: usize, pool: &mut TopkPool) -> Vec<u32> {
    let n = s.len();
    if k >= n {
        return (0..n as u32).collect();
    }
    pool.reset();
    for j in 0..k {
        pool.seed(s[j] * m[j], j as u32);
    }
    const LANES: usize = 8;
    let tail_start = k + (n - k) / LANES * LANES;
    let mut j = k;
    while j + LANES <= n {
        let mut bmax = s[j] * m[j];
        for off in 1..LANES {
            bmax = bmax.max(s[j + off] * m[j + off]);
        }
        if bmax > pool.min_value() {
            for off in 0..LANES {
                pool.offer(s[j + off] * m[j + off], (j + off) as u32);
            }
        }
        j += LANES;
    }
    for jj in tail_start..n {
        pool.offer(s[jj] * m[jj], jj as u32);
    }
    pool.sorted_indices()
}

/// Dense hop mix used by the unfused `hop_mix` op and by oracles.
pub(crate) fn hop_mix_dense(weights: &[f64], hops: &HopSupports) -> Tensor {
    let n = hops.len();
    let kh = hops.k_hops();
    let far = weights[kh];
    let mut out = Tensor::filled(n, n, far);
    let mut row = vec![0.0f64; n];
    for i in 0..n {
        hops.fill_mix_row(i, weights, &mut row);
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}
