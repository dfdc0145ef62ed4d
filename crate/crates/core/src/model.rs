//! One sub-module of the model: feature selection, label-augmented relation
//! graph with multi-hop reweighting, per-row top-k sparsification, two
//! generalized GCN layers, and the second-layer graph used by the
//! consistency loss.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{self, EdgeList, HopSupports, KnnMetric};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which graph a sub-module contributes to the fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionGraphSource {
    /// The sparse pre-normalization relation graph A (default).
    Sparse,
    /// The normalized first-layer graph A'.
    Normalized,
    /// The normalized second-layer graph A(1)'.
    SecondLayer,
}

impl Default for FusionGraphSource {
    fn default() -> Self {
        FusionGraphSource::Sparse
    }
}

/// Trainable tensors of one sub-module.
#[derive(Clone, Debug)]
pub struct SubmoduleParams {
    /// Feature selection vector, 1 x F.
    pub s: Tensor,
    /// First GCN layer, F x hidden.
    pub w1: Tensor,
    /// Second GCN layer, hidden x C.
    pub w2: Tensor,
    /// Raw hop weights, 1 x (K+1); sigmoid maps them into (0,1).
    pub v_raw: Tensor,
}

impl SubmoduleParams {
    /// Selection entries start near one so every feature participates while
    /// sub-modules still differ; layer weights use scaled-uniform bounds;
    /// raw hop weights start at zero (connection probability one half).
    pub fn init(
        rng: &mut ChaCha8Rng,
        n_features: usize,
        hidden: usize,
        n_classes: usize,
        k_hops: usize,
    ) -> Self {
        let s = Tensor::from_fn(1, n_features, |_, _| rng.gen_range(0.9..1.1));
        let w1 = glorot(rng, n_features, hidden);
        let w2 = glorot(rng, hidden, n_classes);
        let v_raw = Tensor::zeros(1, k_hops + 1);
        SubmoduleParams { s, w1, w2, v_raw }
    }
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..bound))
}

/// The relation graph carried from the previous iteration, with its hop
/// reachability structure.
#[derive(Debug)]
pub struct SubmoduleState {
    pub a_last: Tensor,
    pub hops: Rc<HopSupports>,
}

impl SubmoduleState {
    /// First-iteration graph: the normalized external graph when the dataset
    /// has one, otherwise a normalized k-NN graph on the raw features.
    pub fn init(
        x: &Tensor,
        external: Option<&EdgeList>,
        knn_k: usize,
        knn_metric: KnnMetric,
        k_hops: usize,
    ) -> Result<Self> {
        let base = match external {
            Some(el) => el.to_dense(),
            None => graph::knn_graph(x, knn_k.min(x.rows().saturating_sub(1)).max(1), knn_metric)?,
        };
        let a_last = graph::normalize_adjacency(&base)?;
        let hops = Rc::new(HopSupports::from_graph(&a_last, k_hops)?);
        Ok(SubmoduleState { a_last, hops })
    }

    /// Carry the detached second-layer graph into the next iteration.
    pub fn update(&mut self, a1_norm: Tensor, k_hops: usize) -> Result<()> {
        self.hops = Rc::new(HopSupports::from_graph(&a1_norm, k_hops)?);
        self.a_last = a1_norm;
        Ok(())
    }

    /// Same as `update` with the graph's nonzero structure already known.
    pub fn update_with_support(
        &mut self,
        a1_norm: Tensor,
        support: &[Vec<u32>],
        k_hops: usize,
    ) -> Result<()> {
        self.hops = Rc::new(HopSupports::from_lists(a1_norm.rows(), support, k_hops)?);
        self.a_last = a1_norm;
        Ok(())
    }
}

impl Clone for SubmoduleState {
    fn clone(&self) -> Self {
        SubmoduleState { a_last: self.a_last.clone(), hops: Rc::clone(&self.hops) }
    }
}

/// Tape handles produced by one sub-module forward pass.
pub struct SubmoduleNodes {
    /// Class probabilities, N x C.
    pub x2: NodeId,
    /// Normalized first graph A'.
    pub a_norm: NodeId,
    /// Normalized second-layer graph A(1)', absent in prediction-only passes.
    pub a1_norm: Option<NodeId>,
    /// Graph handed to the fusion stage.
    pub graph_for_fusion: NodeId,
}

/// Per-epoch registration of one sub-module's parameters on a tape.
/// Frozen blocks become constant leaves fixed at one.
pub struct SubmoduleNodeIds {
    pub s: NodeId,
    pub w1: NodeId,
    pub w2: NodeId,
    pub v_raw: Option<NodeId>,
    /// sigmoid(v_raw), or a constant-one leaf when hop weights are frozen.
    pub v_tilde: NodeId,
}

pub fn register_submodule(
    tape: &mut Tape,
    params: &SubmoduleParams,
    freeze_selection: bool,
    freeze_hop_weights: bool,
) -> SubmoduleNodeIds {
    let s = if freeze_selection {
        tape.leaf(Tensor::filled(1, params.s.cols(), 1.0))
    } else {
        tape.param(params.s.clone())
    };
    let w1 = tape.param(params.w1.clone());
    let w2 = tape.param(params.w2.clone());
    let (v_raw, v_tilde) = if freeze_hop_weights {
        (None, tape.leaf(Tensor::filled(1, params.v_raw.cols(), 1.0)))
    } else {
        let raw = tape.param(params.v_raw.clone());
        (Some(raw), tape.sigmoid(raw))
    };
    SubmoduleNodeIds { s, w1, w2, v_raw, v_tilde }
}

/// Filtered features: every row of X scaled elementwise by the selection
/// vector (Eq. "x ⊙ s" of the model).
pub fn select_features(tape: &mut Tape, x: NodeId, s: NodeId) -> Result<NodeId> {
    tape.mul(x, s)
}

/// Labels masked outside the training rows, ready for concatenation.
pub fn masked_labels(y: &Tensor, train_mask: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(y.rows(), y.cols());
    for &i in train_mask {
        out.row_mut(i).copy_from_slice(y.row(i));
    }
    out
}

/// Concatenate masked one-hot labels in front of the feature block.
pub fn concat_labels(tape: &mut Tape, features: NodeId, y_masked: NodeId) -> Result<NodeId> {
    tape.concat_cols(y_masked, features)
}

/// Unfused relation graph R = row_softmax(Z Z^T) ⊙ (Σ_h H^h v_h + Htilde v_o).
/// The training path uses the fused `relation_topk`; this composed form is
/// the reference the fused op is tested against.
pub fn relation_graph(
    tape: &mut Tape,
    z: NodeId,
    v_tilde: NodeId,
    hops: &Rc<HopSupports>,
) -> Result<NodeId> {
    let gram = tape.sym_gram(z);
    let s = tape.row_softmax(gram)?;
    let mix = tape.hop_mix(v_tilde, hops)?;
    tape.mul(s, mix)
}

pub struct ForwardSettings<'a> {
    pub k_sparsify: usize,
    pub fusion_source: FusionGraphSource,
    /// Inverted-dropout mask for the second layer input; `None` outside
    /// training or at dropout zero.
    pub dropout_mask: Option<&'a Tensor>,
    /// Skip the second-layer graph branch (prediction-only passes).
    pub with_consistency_graph: bool,
}

/// Full sub-module pipeline. `x` are the raw features (N x F), `y_masked`
/// the label block with non-training rows zeroed.
pub fn submodule_forward(
    tape: &mut Tape,
    x: NodeId,
    y_masked: NodeId,
    ids: &SubmoduleNodeIds,
    state: &SubmoduleState,
    settings: &ForwardSettings,
) -> Result<SubmoduleNodes> {
    let x_sel = select_features(tape, x, ids.s)?;
    let z = concat_labels(tape, x_sel, y_masked)?;
    let a = tape.relation_graph_topk(z, ids.v_tilde, &state.hops, settings.k_sparsify)?;
    let a_norm = tape.sym_norm(a)?;

    // layer 1: relu(A' X~ W1)
    let prop1 = tape.graph_matmul(a_norm, x_sel)?;
    let pre1 = tape.matmul(prop1, ids.w1)?;
    let h1 = tape.relu(pre1);

    // consistency branch from the un-dropped hidden features
    let a1_norm = if settings.with_consistency_graph {
        let z1 = concat_labels(tape, h1, y_masked)?;
        let a1 = tape.gram_topk(z1, settings.k_sparsify)?;
        Some(tape.sym_norm(a1)?)
    } else {
        None
    };

    // layer 2: softmax(A' H1 W2), dropout on the layer input during training
    let h1_in = match settings.dropout_mask {
        Some(mask) => {
            let m = tape.leaf(mask.clone());
            tape.mul(h1, m)?
        }
        None => h1,
    };
    let prop2 = tape.graph_matmul(a_norm, h1_in)?;
    let pre2 = tape.matmul(prop2, ids.w2)?;
    let x2 = tape.row_softmax(pre2)?;

    let graph_for_fusion = match settings.fusion_source {
        FusionGraphSource::Sparse => a,
        FusionGraphSource::Normalized => a_norm,
        FusionGraphSource::SecondLayer => a1_norm.unwrap_or(a_norm),
    };
    Ok(SubmoduleNodes { x2, a_norm, a1_norm, graph_for_fusion })
}

/// Inverted-dropout mask: entries are 1/keep with probability keep, else 0.
pub fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Tensor {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Tensor::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < keep { scale } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_instance() -> (Tensor, Tensor, Vec<usize>) {
        let x = Tensor::from_fn(6, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 * 0.3 - 0.8);
        let labels = [0usize, 1, 0, 1, 0, 1];
        let y = Tensor::from_fn(6, 2, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        (x, y, vec![0, 1, 2])
    }

    #[test]
    fn select_features_identity_and_zero() {
        let (x, _, _) = small_instance();
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let ones = tape.param(Tensor::filled(1, 4, 1.0));
        let sel = select_features(&mut tape, xn, ones).unwrap();
        assert_eq!(tape.value(sel), &x);

        let mut s0 = Tensor::filled(1, 4, 1.0);
        s0.set(0, 2, 0.0);
        let sn = tape.param(s0);
        let sel0 = select_features(&mut tape, xn, sn).unwrap();
        for i in 0..6 {
            assert_eq!(tape.value(sel0).get(i, 2), 0.0);
        }
    }

    #[test]
    fn concat_labels_masking() {
        let (x, y, _) = small_instance();
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());

        // empty mask: label block all zero
        let empty = masked_labels(&y, &[]);
        assert_eq!(empty.values().iter().filter(|v| **v != 0.0).count(), 0);

        // all rows: label block equals Y
        let full = masked_labels(&y, &[0, 1, 2, 3, 4, 5]);
        assert_eq!(full, y);

        let yn = tape.leaf(full);
        let z = concat_labels(&mut tape, xn, yn).unwrap();
        assert_eq!(tape.value(z).cols(), 4 + 2);
        // label block occupies the first C columns
        assert_eq!(tape.value(z).get(0, 0), y.get(0, 0));
    }

    #[test]
    fn relation_graph_identical_rows_symmetry() {
        // N = 2 with identical Z rows: softmax similarity is uniform 0.5
        let z = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.3, 0.7]]).unwrap();
        let mut tape = Tape::new();
        let zn = tape.leaf(z);
        let gram = tape.sym_gram(zn);
        let s = tape.row_softmax(gram).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((tape.value(s).get(i, j) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relation_graph_uniform_hops_collapse() {
        // Fully connected carried graph with self loops and equal hop
        // weights v: every pair is reachable, so M is constant v*K and
        // R = v*K * row_softmax(Z Z^T).
        let n = 5;
        let z = Tensor::from_fn(n, 3, |i, j| ((i * 3 + j) % 4) as f64 * 0.4 - 0.5);
        let full = Tensor::filled(n, n, 1.0);
        let k_hops = 2;
        let hops = Rc::new(HopSupports::from_graph(&full, k_hops).unwrap());
        let mut tape = Tape::new();
        let zn = tape.leaf(z);
        let v = tape.leaf(Tensor::filled(1, k_hops + 1, 0.3));
        let r = relation_graph(&mut tape, zn, v, &hops).unwrap();
        let gram = tape.value(zn).gram();
        let s = gram.row_softmax().unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = 0.3 * k_hops as f64 * s.get(i, j);
                assert!(
                    (tape.value(r).get(i, j) - want).abs() < 1e-12,
                    "({i},{j}): {} vs {want}",
                    tape.value(r).get(i, j)
                );
            }
        }
    }

    #[test]
    fn relation_graph_matches_double_loop_oracle() {
        // 8-node random instance against a direct evaluation of the formula
        let n = 8;
        let z = Tensor::from_fn(n, 5, |i, j| ((i * 7 + j * 11) % 13) as f64 * 0.21 - 1.0);
        let carried = Tensor::from_fn(n, n, |i, j| {
            if (i + 2 * j) % 4 == 1 && i != j { 0.5 } else if i == j { 0.3 } else { 0.0 }
        });
        let k_hops = 2;
        let hops = Rc::new(HopSupports::from_graph(&carried, k_hops).unwrap());
        let v = [0.7, 0.4, 0.2]; // v_1, v_2, v_far

        let mut tape = Tape::new();
        let zn = tape.leaf(z.clone());
        let vn = tape.leaf(Tensor::from_vec(1, 3, v.to_vec()).unwrap());
        let r = relation_graph(&mut tape, zn, vn, &hops).unwrap();

        // oracle: softmax over Z_i . Z_j rows, hop membership by BFS powers
        let (hs, far) = graph::hop_powers(&carried, k_hops).unwrap();
        let s = z.gram().row_softmax().unwrap();
        for i in 0..n {
            for j in 0..n {
                let mut mix = far.get(i, j) * v[2];
                for (h, hmat) in hs.iter().enumerate() {
                    mix += hmat.get(i, j) * v[h];
                }
                let want = s.get(i, j) * mix;
                assert!(
                    (tape.value(r).get(i, j) - want).abs() < 1e-10,
                    "({i},{j}): {} vs {want}",
                    tape.value(r).get(i, j)
                );
            }
        }
    }

    #[test]
    fn fused_relation_topk_matches_composed_path() {
        let n = 8;
        let k = 3;
        let z = Tensor::from_fn(n, 5, |i, j| ((i * 11 + j * 5) % 17) as f64 * 0.13 - 1.0);
        let carried = Tensor::from_fn(n, n, |i, j| {
            if (i * 3 + j) % 5 == 2 && i != j { 0.4 } else if i == j { 0.2 } else { 0.0 }
        });
        let hops = Rc::new(HopSupports::from_graph(&carried, 2).unwrap());
        let v_raw = Tensor::from_vec(1, 3, vec![0.2, -0.4, 0.1]).unwrap();

        // composed: topk(relation_graph)
        let mut t1 = Tape::new();
        let z1 = t1.param(z.clone());
        let vr1 = t1.param(v_raw.clone());
        let vt1 = t1.sigmoid(vr1);
        let r1 = relation_graph(&mut t1, z1, vt1, &hops).unwrap();
        let a1 = t1.topk_rows(r1, k).unwrap();
        let l1 = t1.sum_all(a1);
        let g1 = t1.backward(l1).unwrap();

        // fused
        let mut t2 = Tape::new();
        let z2 = t2.param(z.clone());
        let vr2 = t2.param(v_raw.clone());
        let vt2 = t2.sigmoid(vr2);
        let a2 = t2.relation_graph_topk(z2, vt2, &hops, k).unwrap();
        let l2 = t2.sum_all(a2);
        let g2 = t2.backward(l2).unwrap();

        for (a, b) in t1.value(a1).values().iter().zip(t2.value(a2).values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in
            g1.get(z1).unwrap().values().iter().zip(g2.get(z2).unwrap().values())
        {
            assert!((a - b).abs() < 1e-12, "z gradients differ: {a} vs {b}");
        }
        for (a, b) in
            g1.get(vr1).unwrap().values().iter().zip(g2.get(vr2).unwrap().values())
        {
            assert!((a - b).abs() < 1e-12, "v gradients differ: {a} vs {b}");
        }
    }

    #[test]
    fn fused_gram_topk_matches_composed_path() {
        let n = 9;
        let k = 3;
        let z = Tensor::from_fn(n, 6, |i, j| ((i * 13 + j * 7) % 19) as f64 * 0.17 - 1.1);

        let mut t1 = Tape::new();
        let z1 = t1.param(z.clone());
        let g1 = t1.sym_gram(z1);
        let a1 = t1.topk_rows(g1, k).unwrap();
        let l1 = t1.sum_all(a1);
        let grads1 = t1.backward(l1).unwrap();

        let mut t2 = Tape::new();
        let z2 = t2.param(z.clone());
        let a2 = t2.gram_topk(z2, k).unwrap();
        let l2 = t2.sum_all(a2);
        let grads2 = t2.backward(l2).unwrap();

        for (a, b) in t1.value(a1).values().iter().zip(t2.value(a2).values()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in
            grads1.get(z1).unwrap().values().iter().zip(grads2.get(z2).unwrap().values())
        {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_rows_are_distributions_and_deterministic() {
        let (x, y, train) = small_instance();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SubmoduleParams::init(&mut rng, 4, 8, 2, 2);
        let state = SubmoduleState::init(&x, None, 2, KnnMetric::Cosine, 2).unwrap();
        let y_masked = masked_labels(&y, &train);

        let run = || -> (Tensor, Tensor) {
            let mut tape = Tape::new();
            let xn = tape.leaf(x.clone());
            let yn = tape.leaf(y_masked.clone());
            let ids = register_submodule(&mut tape, &params, false, false);
            let settings = ForwardSettings {
                k_sparsify: 3,
                fusion_source: FusionGraphSource::Sparse,
                dropout_mask: None,
                with_consistency_graph: true,
            };
            let nodes = submodule_forward(&mut tape, xn, yn, &ids, &state, &settings).unwrap();
            (tape.value(nodes.x2).clone(), tape.value(nodes.a1_norm.unwrap()).clone())
        };
        let (x2a, a1a) = run();
        let (x2b, a1b) = run();
        assert_eq!(x2a, x2b);
        assert_eq!(a1a, a1b);
        for i in 0..x2a.rows() {
            let s: f64 = x2a.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for &p in x2a.row(i) {
                assert!(p >= 0.0);
            }
        }
    }

    #[test]
    fn forward_respects_topk_and_nonnegativity() {
        let (x, y, train) = small_instance();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = SubmoduleParams::init(&mut rng, 4, 8, 2, 2);
        let state = SubmoduleState::init(&x, None, 2, KnnMetric::Cosine, 2).unwrap();
        let y_masked = masked_labels(&y, &train);
        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let yn = tape.leaf(y_masked);
        let ids = register_submodule(&mut tape, &params, false, false);
        let k = 2;
        let settings = ForwardSettings {
            k_sparsify: k,
            fusion_source: FusionGraphSource::Sparse,
            dropout_mask: None,
            with_consistency_graph: true,
        };
        let nodes = submodule_forward(&mut tape, xn, yn, &ids, &state, &settings).unwrap();
        let a = tape.value(nodes.graph_for_fusion);
        for i in 0..a.rows() {
            let nnz = a.row(i).iter().filter(|v| **v != 0.0).count();
            assert!(nnz <= k);
        }
        for g in [nodes.a_norm, nodes.a1_norm.unwrap()] {
            for &v in tape.value(g).values() {
                assert!(v >= 0.0);
            }
        }
    }

    #[test]
    fn plain_gcn_equivalence_under_reduction() {
        // s = 1, v frozen at 1, fully connected carried graph, K = 1:
        // the sub-module must equal a plain 2-layer GCN on the top-k
        // softmax-similarity graph.
        let (x, y, train) = small_instance();
        let y_masked = masked_labels(&y, &train);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = SubmoduleParams::init(&mut rng, 4, 8, 2, 1);
        let full = Tensor::filled(6, 6, 1.0);
        let state = SubmoduleState {
            a_last: full.clone(),
            hops: Rc::new(HopSupports::from_graph(&full, 1).unwrap()),
        };
        let k = 3;

        let mut tape = Tape::new();
        let xn = tape.leaf(x.clone());
        let yn = tape.leaf(y_masked.clone());
        let ids = register_submodule(&mut tape, &params, true, true);
        let settings = ForwardSettings {
            k_sparsify: k,
            fusion_source: FusionGraphSource::Sparse,
            dropout_mask: None,
            with_consistency_graph: false,
        };
        let nodes = submodule_forward(&mut tape, xn, yn, &ids, &state, &settings).unwrap();

        // standalone GCN oracle on plain tensors
        let z = y_masked.concat_cols(&x).unwrap();
        let sim = z.gram().row_softmax().unwrap();
        let a = graph::topk_rows(&sim, k).unwrap();
        let a_norm = graph::normalize_adjacency(&a).unwrap();
        let h1 = a_norm.matmul(&x).unwrap().matmul(&params.w1).unwrap().map(|v| v.max(0.0));
        let out = a_norm
            .matmul(&h1)
            .unwrap()
            .matmul(&params.w2)
            .unwrap()
            .row_softmax()
            .unwrap();
        for (got, want) in tape.value(nodes.x2).values().iter().zip(out.values()) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn state_update_changes_hops() {
        let (x, _, _) = small_instance();
        let mut state = SubmoduleState::init(&x, None, 2, KnnMetric::Cosine, 2).unwrap();
        let before = state.a_last.clone();
        let next = Tensor::eye(6);
        state.update(next.clone(), 2).unwrap();
        assert_eq!(state.a_last, next);
        assert_ne!(state.a_last, before);
        // identity graph reaches only itself
        for i in 0..6 {
            assert_eq!(state.hops.reach_row(i), &[i as u32]);
        }
    }

    #[test]
    fn dropout_mask_scales_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(&mut rng, 50, 20, 0.5);
        for &v in m.values() {
            assert!(v == 0.0 || (v - 2.0).abs() < 1e-15);
        }
        let kept = m.values().iter().filter(|v| **v != 0.0).count();
        let frac = kept as f64 / 1000.0;
        assert!((0.4..0.6).contains(&frac), "kept fraction {frac}");
    }
}
