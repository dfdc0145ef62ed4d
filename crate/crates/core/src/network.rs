//! The network of graphs: attention over the M sub-modules plus one
//! aggregation node, fusion of predictions and learned graphs, and the
//! training loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// How the aggregation node's features are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggFeatureMode {
    /// Previous iteration's fused prediction, detached (default).
    PrevFused,
    /// Mean of the current sub-module outputs, differentiable.
    MeanOutputs,
    /// A free trainable N x C matrix.
    FreeParam,
}

impl Default for AggFeatureMode {
    fn default() -> Self {
        AggFeatureMode::PrevFused
    }
}

/// Trainables of the fusion stage: the attention vector over flattened
/// outputs and the mixing matrix.
#[derive(Clone, Debug)]
pub struct NetworkParams {
    /// 1 x (N*C) attention vector.
    pub attention: Tensor,
    /// (M+1) x (M+1) mixing matrix, multiplied onto the attention matrix.
    pub mixing: Tensor,
    /// Trainable aggregation features, used only in `FreeParam` mode.
    pub x_agg_free: Tensor,
}

impl NetworkParams {
    /// Attention starts at small uniform values; mixing starts at identity
    /// so fusion begins as plain attention.
    pub fn init(rng: &mut ChaCha8Rng, n: usize, c: usize, m: usize) -> Self {
        let bound = 1.0 / ((n * c) as f64).sqrt();
        let attention = Tensor::from_fn(1, n * c, |_, _| rng.gen_range(-bound..bound));
        let mixing = Tensor::eye(m + 1);
        let x_agg_free = Tensor::filled(n, c, 1.0 / c as f64);
        NetworkParams { attention, mixing, x_agg_free }
    }
}

/// Carried aggregation-node state: the previous fused prediction.
#[derive(Clone, Debug)]
pub struct AggState {
    pub x_agg: Tensor,
}

impl AggState {
    /// Uniform rows before the first iteration.
    pub fn init(n: usize, c: usize) -> Self {
        AggState { x_agg: Tensor::filled(n, c, 1.0 / c as f64) }
    }

    /// Detached copy of the fused prediction for the next iteration.
    pub fn update(&mut self, fused: &Tensor) {
        self.x_agg = fused.clone();
    }
}

/// Symmetric (M+1) x (M+1) attention matrix over the flattened sub-module
/// outputs and aggregation features: alpha_pq = a^T (flat(O_p) ⊙ flat(O_q)).
/// Index M is the aggregation node.
pub fn attention_matrix(
    tape: &mut Tape,
    outputs: &[NodeId],
    x_agg: NodeId,
    attention: NodeId,
) -> Result<NodeId> {
    let m = outputs.len();
    if m == 0 {
        return Err(Error::invalid("attention_matrix needs at least one sub-module output"));
    }
    let shape = (tape.value(outputs[0]).rows(), tape.value(outputs[0]).cols());
    for &o in outputs.iter().chain(std::iter::once(&x_agg)) {
        let v = tape.value(o);
        if (v.rows(), v.cols()) != shape {
            return Err(Error::ShapeMismatch {
                op: "attention_matrix",
                left_rows: shape.0,
                left_cols: shape.1,
                right_rows: v.rows(),
                right_cols: v.cols(),
            });
        }
    }
    if tape.value(attention).len() != shape.0 * shape.1 {
        return Err(Error::InvalidDimension {
            op: "attention_matrix",
            expected: format!("attention vector of length {}", shape.0 * shape.1),
            got: format!("{}", tape.value(attention).len()),
        });
    }
    let mut flats = Vec::with_capacity(m + 1);
    for &o in outputs {
        flats.push(tape.flatten(o));
    }
    flats.push(tape.flatten(x_agg));

    // one scalar node per unordered pair; the matrix reuses it on both sides
    let total = m + 1;
    let mut pair = vec![None; total * total];
    for p in 0..total {
        for q in p..total {
            let prod = tape.mul(flats[p], flats[q])?;
            let weighted = tape.mul(prod, attention)?;
            let scalar = tape.sum_all(weighted);
            pair[p * total + q] = Some(scalar);
            pair[q * total + p] = Some(scalar);
        }
    }
    let entries: Vec<NodeId> = pair.into_iter().map(|e| e.unwrap()).collect();
    tape.assemble_scalars(&entries, total, total)
}

/// N = alpha * b, the adjacency of the network of graphs.
pub fn network_adjacency(tape: &mut Tape, alpha: NodeId, mixing: NodeId) -> Result<NodeId> {
    tape.matmul(alpha, mixing)
}

/// Fused class prediction: softmax over the aggregation row of the network
/// applied to sub-module outputs plus the aggregation features.
pub fn fuse_predictions(
    tape: &mut Tape,
    outputs: &[NodeId],
    x_agg: NodeId,
    net: NodeId,
) -> Result<NodeId> {
    let m = outputs.len();
    let total = m + 1;
    let nv = tape.value(net);
    if nv.rows() != total || nv.cols() != total {
        return Err(Error::InvalidDimension {
            op: "fuse_predictions",
            expected: format!("{total}x{total} network adjacency"),
            got: format!("{}x{}", nv.rows(), nv.cols()),
        });
    }
    let agg_row = m * total;
    let mut sum = tape.scale_by_entry(outputs[0], net, agg_row)?;
    for (i, &o) in outputs.iter().enumerate().skip(1) {
        let term = tape.scale_by_entry(o, net, agg_row + i)?;
        sum = tape.add(sum, term)?;
    }
    let agg_term = tape.scale_by_entry(x_agg, net, agg_row + m)?;
    sum = tape.add(sum, agg_term)?;
    tape.row_softmax(sum)
}

/// Fused graph: softmax of the network-weighted sum of sub-module graphs.
/// Pure (reporting path); the loss never consumes it.
pub fn fuse_graphs(graphs: &[&Tensor], net: &Tensor) -> Result<Tensor> {
    let m = graphs.len();
    if m == 0 {
        return Err(Error::invalid("fuse_graphs needs at least one graph"));
    }
    let total = m + 1;
    if net.rows() != total || net.cols() != total {
        return Err(Error::InvalidDimension {
            op: "fuse_graphs",
            expected: format!("{total}x{total} network adjacency"),
            got: format!("{}x{}", net.rows(), net.cols()),
        });
    }
    let mut sum = Tensor::zeros(graphs[0].rows(), graphs[0].cols());
    for (i, g) in graphs.iter().enumerate() {
        let w = net.get(m, i);
        if !g.same_shape(&sum) {
            return Err(Error::ShapeMismatch {
                op: "fuse_graphs",
                left_rows: sum.rows(),
                left_cols: sum.cols(),
                right_rows: g.rows(),
                right_cols: g.cols(),
            });
        }
        for (acc, &v) in sum.values_mut().iter_mut().zip(g.values()) {
            *acc += w * v;
        }
    }
    sum.row_softmax()
}

/// Loss terms of one iteration.
pub struct LossNodes {
    pub total: NodeId,
    pub consistency: NodeId,
    pub classification: NodeId,
}

/// mu_l1 * Σ_m |A'_m − A(1)'_m| + mu_l2 * CE(fused, Y, train mask).
/// The regularization term is decoupled weight decay inside the optimizer;
/// callers report its value separately rather than adding it twice.
pub fn total_loss(
    tape: &mut Tape,
    a_norms: &[NodeId],
    a1_norms: &[NodeId],
    fused: NodeId,
    y: &Tensor,
    train_mask: &[usize],
    mu_l1: f64,
    mu_l2: f64,
) -> Result<LossNodes> {
    if a_norms.len() != a1_norms.len() || a_norms.is_empty() {
        return Err(Error::invalid("total_loss needs matching graph lists per sub-module"));
    }
    let mut consistency = tape.l1_diff(a_norms[0], a1_norms[0])?;
    for i in 1..a_norms.len() {
        let term = tape.l1_diff(a_norms[i], a1_norms[i])?;
        consistency = tape.add(consistency, term)?;
    }
    let classification = tape.masked_cross_entropy(fused, y, train_mask)?;
    let l1_scaled = tape.scale_const(consistency, mu_l1);
    let l2_scaled = tape.scale_const(classification, mu_l2);
    let total = tape.add(l1_scaled, l2_scaled)?;
    Ok(LossNodes { total, consistency, classification })
}

/// Decoupled-decay contribution reported alongside the loss:
/// (wd / 2) Σ ||θ||².
pub fn regularization_value(weight_decay: f64, params: &[&Tensor]) -> f64 {
    0.5 * weight_decay
        * params
            .iter()
            .map(|p| p.values().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
}

/// Sparsified fused graph for export and denoise scoring.
pub fn fused_topk_graph(graphs: &[&Tensor], net: &Tensor, k: usize) -> Result<Tensor> {
    let fused = fuse_graphs(graphs, net)?;
    graph::topk_rows(&fused, k)
}
