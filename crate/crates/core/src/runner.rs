//! Training loop, evaluation, experiment harnesses, baselines, and run
//! configuration. One run is single threaded and fully determined by its
//! seed; reports with the same config and seed are byte-identical.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SplitMode, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::{self, KnnMetric, NoiseRecord};
use crate::model::{
    dropout_mask, masked_labels, register_submodule, submodule_forward, ForwardSettings,
    FusionGraphSource, SubmoduleParams, SubmoduleState,
};
use crate::network::{
    self, attention_matrix, fuse_predictions, network_adjacency, total_loss, AggFeatureMode,
    AggState, NetworkParams,
};
use crate::optim::{AdamConfig, OptimizerState};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Dense N x N products bound the practical problem size; larger runs must
/// opt in explicitly.
const LARGE_N_THRESHOLD: usize = 4000;

// ---- configuration ---------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Manifest { manifest: String },
    Synthetic { synthetic: SyntheticSpec },
}

fn default_modules() -> usize {
    3
}
fn default_hop_cutoff() -> usize {
    2
}
fn default_top_k() -> usize {
    10
}
fn default_epochs() -> usize {
    200
}
fn default_lr() -> f64 {
    0.01
}
fn default_mu() -> f64 {
    1.0
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_dropout() -> f64 {
    0.5
}
fn default_hidden() -> usize {
    32
}
fn default_knn_k() -> usize {
    10
}
fn default_knn_metric() -> KnnMetric {
    KnnMetric::Cosine
}
fn default_standardize() -> bool {
    true
}
fn default_val_stride() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_modules")]
    pub modules: usize,
    #[serde(default = "default_hop_cutoff")]
    pub hop_cutoff: usize,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_mu")]
    pub mu_l1: f64,
    #[serde(default = "default_mu")]
    pub mu_l2: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_knn_k")]
    pub knn_init_k: usize,
    #[serde(default = "default_knn_metric")]
    pub knn_metric: KnnMetric,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_standardize")]
    pub standardize: bool,
    /// Evaluate validation accuracy every this many epochs (checkpoint
    /// granularity trades against runtime on large datasets).
    #[serde(default = "default_val_stride")]
    pub val_eval_stride: usize,
    /// Override the manifest's split sizes (required for synthetic data).
    #[serde(default)]
    pub n_train: Option<usize>,
    #[serde(default)]
    pub n_val: Option<usize>,
    /// Noise edges planted before training (denoise mode).
    #[serde(default)]
    pub noise_edges: usize,
    /// Reduction switches: freeze the selection vector / hop weights at one.
    #[serde(default)]
    pub freeze_selection: bool,
    #[serde(default)]
    pub freeze_hop_weights: bool,
    #[serde(default)]
    pub agg_feature: AggFeatureMode,
    #[serde(default)]
    pub fusion_graph: FusionGraphSource,
    #[serde(default)]
    pub export_network: bool,
    #[serde(default)]
    pub export_graph: bool,
    #[serde(default)]
    pub export_features: bool,
    #[serde(default)]
    pub out_dir: Option<String>,
    /// Opt-in for datasets beyond the dense-tensor comfort zone.
    #[serde(default)]
    pub large: bool,
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.modules < 1 {
            return Err(Error::Config("modules must be >= 1".into()));
        }
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        if self.hop_cutoff < 1 {
            return Err(Error::Config("hop_cutoff must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.val_eval_stride < 1 {
            return Err(Error::Config("val_eval_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Output directory: explicit config, else `GLGNN_OUT_DIR`, else cwd.
    pub fn resolved_out_dir(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return PathBuf::from(d);
        }
        if let Some(d) = std::env::var_os("GLGNN_OUT_DIR") {
            return PathBuf::from(d);
        }
        PathBuf::from(".")
    }
}

// ---- reports ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_consistency: f64,
    pub loss_classification: f64,
    pub loss_regularization: f64,
    pub loss_total: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseReport {
    pub added: usize,
    pub remaining: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureDeletionReport {
    pub deleted_count: usize,
    pub baseline_accuracy: f64,
    pub low_deleted_accuracy: f64,
    pub top_deleted_accuracy: f64,
}

/// Schema-stable run summary: every mode emits the same keys, with `null`
/// for metrics that do not apply. Wall time is reported in memory and on
/// stdout but serialized as `null` so reports stay byte-identical per seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub dataset: String,
    pub seed: u64,
    pub baseline: Option<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub wall_time_seconds: Option<f64>,
    pub noise: Option<NoiseReport>,
    pub feature_weights: Option<Vec<FeatureWeight>>,
    pub feature_deletion: Option<FeatureDeletionReport>,
}

impl RunReport {
    fn empty(mode: &str, dataset: &str, seed: u64) -> Self {
        RunReport {
            mode: mode.to_string(),
            dataset: dataset.to_string(),
            seed,
            baseline: None,
            epochs: Vec::new(),
            best_epoch: None,
            best_val_accuracy: None,
            final_test_accuracy: None,
            wall_time_seconds: None,
            noise: None,
            feature_weights: None,
            feature_deletion: None,
        }
    }

    /// JSON with volatile fields removed; byte-identical for identical runs.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_time_seconds = None;
        let mut s = serde_json::to_string_pretty(&clone).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.deterministic_json())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

// ---- model assembly -----------------------------------------------------------

/// Everything learned by a run, with the fused outputs of the best epoch.
pub struct TrainedModel {
    pub submodules: Vec<SubmoduleParams>,
    pub states: Vec<SubmoduleState>,
    pub network: NetworkParams,
    pub agg: AggState,
    /// Fused prediction of the restored best model.
    pub prediction: Tensor,
    /// Network-of-graphs adjacency of the restored best model.
    pub network_adjacency: Tensor,
    /// Fused graph after per-row top-k sparsification.
    pub fused_graph: Tensor,
    /// Mean |s| per feature across sub-modules.
    pub feature_weights: Vec<f64>,
}

struct EpochNodes {
    trainable: Vec<NodeId>,
    a_norms: Vec<NodeId>,
    a1_norms: Vec<NodeId>,
    fusion_graphs: Vec<NodeId>,
    fused: NodeId,
    nmat: NodeId,
}

#[allow(clippy::too_many_arguments)]
fn forward_pass(
    tape: &mut Tape,
    cfg: &RunConfig,
    x: &Tensor,
    y_masked: &Tensor,
    submodules: &[SubmoduleParams],
    states: &[SubmoduleState],
    net: &NetworkParams,
    agg: &AggState,
    dropout_masks: Option<&[Tensor]>,
    with_consistency: bool,
) -> Result<EpochNodes> {
    let xn = tape.leaf(x.clone());
    let yn = tape.leaf(y_masked.clone());
    let mut trainable = Vec::new();
    let mut x2 = Vec::new();
    let mut a_norms = Vec::new();
    let mut a1_norms = Vec::new();
    let mut fusion_graphs = Vec::new();
    for (m, params) in submodules.iter().enumerate() {
        let ids = register_submodule(tape, params, cfg.freeze_selection, cfg.freeze_hop_weights);
        if !cfg.freeze_selection {
            trainable.push(ids.s);
        }
        trainable.push(ids.w1);
        trainable.push(ids.w2);
        if let Some(v) = ids.v_raw {
            trainable.push(v);
        }
        let settings = ForwardSettings {
            k_sparsify: cfg.top_k,
            fusion_source: cfg.fusion_graph,
            dropout_mask: dropout_masks.map(|d| &d[m]),
            with_consistency_graph: with_consistency,
        };
        let nodes = submodule_forward(tape, xn, yn, &ids, &states[m], &settings)?;
        x2.push(nodes.x2);
        a_norms.push(nodes.a_norm);
        if let Some(a1) = nodes.a1_norm {
            a1_norms.push(a1);
        }
        fusion_graphs.push(nodes.graph_for_fusion);
    }
    let a_node = tape.param(net.attention.clone());
    let b_node = tape.param(net.mixing.clone());
    trainable.push(a_node);
    trainable.push(b_node);
    let x_agg_node = match cfg.agg_feature {
        AggFeatureMode::PrevFused => tape.leaf(agg.x_agg.clone()),
        AggFeatureMode::MeanOutputs => {
            let mut sum = x2[0];
            for &o in &x2[1..] {
                sum = tape.add(sum, o)?;
            }
            tape.scale_const(sum, 1.0 / x2.len() as f64)
        }
        AggFeatureMode::FreeParam => {
            let id = tape.param(net.x_agg_free.clone());
            trainable.push(id);
            id
        }
    };
    let alpha = attention_matrix(tape, &x2, x_agg_node, a_node)?;
    let nmat = network_adjacency(tape, alpha, b_node)?;
    let fused = fuse_predictions(tape, &x2, x_agg_node, nmat)?;
    Ok(EpochNodes { trainable, a_norms, a1_norms, fusion_graphs, fused, nmat })
}

fn trainable_tensors<'a>(
    submodules: &'a [SubmoduleParams],
    net: &'a NetworkParams,
    cfg: &RunConfig,
) -> Vec<&'a Tensor> {
    let mut out = Vec::new();
    for p in submodules {
        if !cfg.freeze_selection {
            out.push(&p.s);
        }
        out.push(&p.w1);
        out.push(&p.w2);
        if !cfg.freeze_hop_weights {
            out.push(&p.v_raw);
        }
    }
    out.push(&net.attention);
    out.push(&net.mixing);
    if cfg.agg_feature == AggFeatureMode::FreeParam {
        out.push(&net.x_agg_free);
    }
    out
}

fn trainable_tensors_mut<'a>(
    submodules: &'a mut [SubmoduleParams],
    net: &'a mut NetworkParams,
    cfg: &RunConfig,
) -> Vec<&'a mut Tensor> {
    let mut out: Vec<&mut Tensor> = Vec::new();
    for p in submodules.iter_mut() {
        if !cfg.freeze_selection {
            out.push(&mut p.s);
        }
        out.push(&mut p.w1);
        out.push(&mut p.w2);
        if !cfg.freeze_hop_weights {
            out.push(&mut p.v_raw);
        }
    }
    out.push(&mut net.attention);
    out.push(&mut net.mixing);
    if cfg.agg_feature == AggFeatureMode::FreeParam {
        out.push(&mut net.x_agg_free);
    }
    out
}

// ---- dataset preparation -------------------------------------------------------

/// Load, split, standardize, and optionally plant noise edges.
pub fn prepare_dataset(cfg: &RunConfig) -> Result<(Dataset, Option<NoiseRecord>)> {
    let (mut ds, n_train, n_val) = match &cfg.dataset {
        DatasetSource::Manifest { manifest } => {
            let (m, ds) = data::load_manifest(manifest)?;
            (ds, cfg.n_train.unwrap_or(m.n_train), cfg.n_val.unwrap_or(m.n_val))
        }
        DatasetSource::Synthetic { synthetic } => {
            let mut spec = synthetic.clone();
            if spec.seed == 0 {
                spec.seed = cfg.seed.wrapping_add(0x5eed);
            }
            let (ds, _) = data::synth(&spec)?;
            let n_train = cfg.n_train.ok_or_else(|| {
                Error::Config("n_train is required for synthetic datasets".into())
            })?;
            let n_val = cfg.n_val.unwrap_or(0);
            (ds, n_train, n_val)
        }
    };
    if ds.n() > LARGE_N_THRESHOLD && !cfg.large {
        let gib = (cfg.modules * 11 * ds.n() * ds.n() * 8) as f64 / (1u64 << 30) as f64;
        return Err(Error::Config(format!(
            "{} samples need roughly {gib:.1} GiB of dense workspace; pass large=true (or --large) to proceed",
            ds.n()
        )));
    }
    ds = data::make_splits(&ds, n_train, n_val, cfg.seed, SplitMode::Remainder)?;
    if cfg.standardize {
        ds = data::standardize(&ds);
    }
    let mut record = None;
    if cfg.noise_edges > 0 {
        let graph = ds.graph.clone().ok_or_else(|| {
            Error::Config("noise injection needs a dataset with a graph".into())
        })?;
        let (noisy, rec) = graph::inject_noise_edges(&graph, cfg.noise_edges, cfg.seed)?;
        ds.graph = Some(noisy);
        record = Some(rec);
    }
    Ok((ds, record))
}

// ---- evaluation ------------------------------------------------------------------

/// Fraction of masked rows whose argmax prediction matches the label.
/// Ties break toward the lower class index.
pub fn evaluate(pred: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask("evaluate needs a nonempty mask"));
    }
    let mut correct = 0usize;
    for &i in mask {
        let row = pred.row(i);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        if best == labels[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / mask.len() as f64)
}

// ---- training --------------------------------------------------------------------

struct Snapshot {
    submodules: Vec<SubmoduleParams>,
    states: Vec<SubmoduleState>,
    network: NetworkParams,
    agg: AggState,
    epoch: usize,
    val_accuracy: f64,
    val_loss: f64,
}

/// Checkpoint rule: higher validation accuracy wins; equal accuracy falls
/// back to lower validation cross-entropy (small validation sets saturate
/// early and the loss keeps separating checkpoints).
fn improves(best: Option<(f64, f64)>, acc: f64, loss: f64) -> bool {
    match best {
        None => true,
        Some((ba, bl)) => acc > ba || (acc == ba && loss < bl),
    }
}

/// Cross-entropy of predictions over a mask, for checkpoint tie-breaking.
fn masked_ce_value(pred: &Tensor, y: &Tensor, mask: &[usize]) -> f64 {
    let mut loss = 0.0;
    for &i in mask {
        for (pc, yc) in pred.row(i).iter().zip(y.row(i)) {
            if *yc != 0.0 {
                loss -= yc * (pc + crate::tape::CE_EPSILON).ln();
            }
        }
    }
    loss
}

/// Train on an already prepared dataset. Runs exactly `cfg.epochs`
/// iterations, tracks the best validation accuracy, and restores that
/// checkpoint before the final evaluation.
pub fn train_prepared(cfg: &RunConfig, ds: &Dataset) -> Result<(TrainedModel, RunReport)> {
    cfg.validate()?;
    if ds.train.is_empty() {
        return Err(Error::Config("training mask is empty".into()));
    }
    let start = Instant::now();
    let (n, f, c, m) = (ds.n(), ds.f(), ds.c(), cfg.modules);

    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_init.set_stream(0);
    let mut submodules: Vec<SubmoduleParams> = (0..m)
        .map(|_| SubmoduleParams::init(&mut rng_init, f, cfg.hidden_dim, c, cfg.hop_cutoff))
        .collect();
    let mut net = NetworkParams::init(&mut rng_init, n, c, m);
    let init_state = SubmoduleState::init(
        &ds.x,
        ds.graph.as_ref(),
        cfg.knn_init_k,
        cfg.knn_metric,
        cfg.hop_cutoff,
    )?;
    let mut states: Vec<SubmoduleState> = (0..m).map(|_| init_state.clone()).collect();
    let mut agg = AggState::init(n, c);

    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut optimizer = OptimizerState::new(adam, &trainable_tensors(&submodules, &net, cfg));

    let y_masked = masked_labels(&ds.y, &ds.train);
    let mut rng_drop = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_drop.set_stream(2);

    let mut report = RunReport::empty("train", &ds.name, cfg.seed);
    let mut best: Option<Snapshot> = None;
    let mut network_trace: Vec<Tensor> = Vec::new();

    let trace = std::env::var_os("GLGNN_TRACE").is_some();
    let mut t_fwd = 0.0f64;
    let mut t_loss = 0.0f64;
    let mut t_bwd = 0.0f64;
    let mut t_step = 0.0f64;
    let mut t_state = 0.0f64;
    let mut t_eval = 0.0f64;
    for epoch in 0..cfg.epochs {
        let tick = Instant::now();
        let masks: Option<Vec<Tensor>> = (cfg.dropout > 0.0).then(|| {
            (0..m).map(|_| dropout_mask(&mut rng_drop, n, cfg.hidden_dim, cfg.dropout)).collect()
        });
        let mut tape = Tape::new();
        let nodes = forward_pass(
            &mut tape,
            cfg,
            &ds.x,
            &y_masked,
            &submodules,
            &states,
            &net,
            &agg,
            masks.as_deref(),
            true,
        )?;
        let losses = total_loss(
            &mut tape,
            &nodes.a_norms,
            &nodes.a1_norms,
            nodes.fused,
            &ds.y,
            &ds.train,
            cfg.mu_l1,
            cfg.mu_l2,
        )?;
        t_fwd += tick.elapsed().as_secs_f64();
        let tick = Instant::now();
        let l1v = tape.value(losses.consistency).values()[0];
        let l2v = tape.value(losses.classification).values()[0];
        let regv =
            network::regularization_value(cfg.weight_decay, &trainable_tensors(&submodules, &net, cfg));

        t_loss += tick.elapsed().as_secs_f64();
        let tick = Instant::now();
        let grads = tape.backward(losses.total)?;
        let grad_tensors: Vec<Tensor> = nodes
            .trainable
            .iter()
            .map(|&id| {
                let v = tape.value(id);
                grads.get_or_zeros(id, v.rows(), v.cols())
            })
            .collect();
        t_bwd += tick.elapsed().as_secs_f64();
        let tick = Instant::now();
        {
            let mut params = trainable_tensors_mut(&mut submodules, &mut net, cfg);
            let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
            optimizer.step(&mut params, &grad_refs)?;
        }
        t_step += tick.elapsed().as_secs_f64();
        let tick = Instant::now();

        // carry states: detached second-layer graphs and the fused prediction
        for (i, &a1) in nodes.a1_norms.iter().enumerate() {
            let value = tape.value(a1).clone();
            match tape.graph_support(a1) {
                Some(lists) => states[i].update_with_support(value, &lists, cfg.hop_cutoff)?,
                None => states[i].update(value, cfg.hop_cutoff)?,
            }
        }
        let fused_val = tape.value(nodes.fused).clone();
        if cfg.agg_feature == AggFeatureMode::PrevFused {
            agg.update(&fused_val);
        }
        if cfg.export_network {
            network_trace.push(tape.value(nodes.nmat).clone());
        }
        drop(tape);
        t_state += tick.elapsed().as_secs_f64();
        let tick = Instant::now();

        // validation accuracy of the end-of-epoch model, dropout off
        let eval_now = !ds.val.is_empty()
            && ((epoch + 1) % cfg.val_eval_stride == 0 || epoch + 1 == cfg.epochs);
        let val_scores = if !eval_now {
            None
        } else {
            let mut eval_tape = Tape::new();
            let eval_nodes = forward_pass(
                &mut eval_tape,
                cfg,
                &ds.x,
                &y_masked,
                &submodules,
                &states,
                &net,
                &agg,
                None,
                false,
            )?;
            let pred = eval_tape.value(eval_nodes.fused);
            let acc = evaluate(pred, &ds.labels, &ds.val)?;
            let ce = masked_ce_value(pred, &ds.y, &ds.val);
            Some((acc, ce))
        };
        report.epochs.push(EpochRecord {
            epoch,
            loss_consistency: l1v,
            loss_classification: l2v,
            loss_regularization: regv,
            loss_total: cfg.mu_l1 * l1v + cfg.mu_l2 * l2v + regv,
            val_accuracy: val_scores.map(|(acc, _)| acc),
        });
        t_eval += tick.elapsed().as_secs_f64();
        if let Some((acc, ce)) = val_scores {
            if improves(best.as_ref().map(|b| (b.val_accuracy, b.val_loss)), acc, ce) {
                best = Some(Snapshot {
                    submodules: submodules.clone(),
                    states: states.clone(),
                    network: net.clone(),
                    agg: agg.clone(),
                    epoch,
                    val_accuracy: acc,
                    val_loss: ce,
                });
            }
        }
    }

    if trace {
        eprintln!(
            "trace: fwd {t_fwd:.3}s loss {t_loss:.3}s bwd {t_bwd:.3}s step {t_step:.3}s state {t_state:.3}s eval {t_eval:.3}s"
        );
    }
    // restore the best checkpoint before the final evaluation
    if let Some(b) = best {
        submodules = b.submodules;
        states = b.states;
        net = b.network;
        agg = b.agg;
        report.best_epoch = Some(b.epoch);
        report.best_val_accuracy = Some(b.val_accuracy);
    }

    // one clean full pass for predictions, graphs, and the network matrix
    let mut final_tape = Tape::new();
    let final_nodes = forward_pass(
        &mut final_tape,
        cfg,
        &ds.x,
        &y_masked,
        &submodules,
        &states,
        &net,
        &agg,
        None,
        true,
    )?;
    let prediction = final_tape.value(final_nodes.fused).clone();
    let nmat = final_tape.value(final_nodes.nmat).clone();
    let graphs: Vec<&Tensor> =
        final_nodes.fusion_graphs.iter().map(|&g| final_tape.value(g)).collect();
    let fused_graph = network::fused_topk_graph(&graphs, &nmat, cfg.top_k)?;

    if !ds.test.is_empty() {
        report.final_test_accuracy = Some(evaluate(&prediction, &ds.labels, &ds.test)?);
    }
    let feature_weights: Vec<f64> = (0..f)
        .map(|j| {
            submodules.iter().map(|p| p.s.get(0, j).abs()).sum::<f64>() / submodules.len() as f64
        })
        .collect();
    report.feature_weights = Some(
        ds.feature_names
            .iter()
            .zip(&feature_weights)
            .map(|(name, &weight)| FeatureWeight { name: name.clone(), weight })
            .collect(),
    );
    report.wall_time_seconds = Some(start.elapsed().as_secs_f64());

    let model = TrainedModel {
        submodules,
        states,
        network: net,
        agg,
        prediction,
        network_adjacency: nmat,
        fused_graph,
        feature_weights,
    };
    if cfg.export_network {
        write_network_trace(cfg, &network_trace)?;
    }
    Ok((model, report))
}

fn write_network_trace(cfg: &RunConfig, trace: &[Tensor]) -> Result<()> {
    let dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let path = dir.join("network_of_graphs.jsonl");
    let mut out = String::new();
    for (epoch, t) in trace.iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..t.rows()).map(|i| t.row(i).to_vec()).collect();
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "epoch": epoch,
            "network": rows,
        }))?);
        out.push('\n');
    }
    std::fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Prepare the dataset and train the full model.
pub fn train(cfg: &RunConfig) -> Result<(TrainedModel, RunReport, Dataset)> {
    let (ds, _) = prepare_dataset(cfg)?;
    let (model, report) = train_prepared(cfg, &ds)?;
    Ok((model, report, ds))
}

// ---- experiments --------------------------------------------------------------

/// Plant noise edges, train, and count how many planted edges survive in
/// the sparsified fused graph.
pub fn run_denoise(cfg: &RunConfig) -> Result<(TrainedModel, RunReport, Dataset)> {
    let (ds, record) = prepare_dataset(cfg)?;
    let (model, mut report) = train_prepared(cfg, &ds)?;
    report.mode = "denoise".into();
    report.noise = Some(match &record {
        Some(rec) => {
            let (remaining, added) = graph::remaining_noise(&model.fused_graph, rec);
            NoiseReport { added, remaining }
        }
        None => NoiseReport { added: 0, remaining: 0 },
    });
    Ok((model, report, ds))
}

/// Train, rank features by mean |s|, and retrain a plain k-NN GCN with the
/// lowest-weighted and the highest-weighted fraction removed.
pub fn run_feature_report(cfg: &RunConfig, delete_fraction: f64) -> Result<RunReport> {
    if !(0.0..1.0).contains(&delete_fraction) {
        return Err(Error::Config(format!(
            "delete fraction {delete_fraction} outside [0, 1)"
        )));
    }
    let (model, mut report, ds) = train(cfg)?;
    report.mode = "features".into();
    let f = ds.f();
    let delete_count = (delete_fraction * f as f64).floor() as usize;

    let mut ranked: Vec<usize> = (0..f).collect();
    ranked.sort_by(|&a, &b| {
        model.feature_weights[a]
            .partial_cmp(&model.feature_weights[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let low_set: Vec<usize> = ranked[..delete_count].to_vec();
    let top_set: Vec<usize> = ranked[f - delete_count..].to_vec();

    let baseline = baseline_knn_gcn(cfg, &ds)?;
    let low_deleted = if delete_count == 0 {
        baseline
    } else {
        baseline_knn_gcn(cfg, &drop_features(&ds, &low_set))?
    };
    let top_deleted = if delete_count == 0 {
        baseline
    } else {
        baseline_knn_gcn(cfg, &drop_features(&ds, &top_set))?
    };
    report.feature_deletion = Some(FeatureDeletionReport {
        deleted_count: delete_count,
        baseline_accuracy: baseline,
        low_deleted_accuracy: low_deleted,
        top_deleted_accuracy: top_deleted,
    });
    Ok(report)
}

fn drop_features(ds: &Dataset, remove: &[usize]) -> Dataset {
    let keep: Vec<usize> = (0..ds.f()).filter(|j| !remove.contains(j)).collect();
    let mut out = ds.clone();
    out.x = Tensor::from_fn(ds.n(), keep.len(), |i, jj| ds.x.get(i, keep[jj]));
    out.feature_names = keep.iter().map(|&j| ds.feature_names[j].clone()).collect();
    out
}

// ---- baselines --------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    KnnGcn,
    LogReg,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "knn_gcn" | "knn-gcn" => Ok(Baseline::KnnGcn),
            "logreg" => Ok(Baseline::LogReg),
            other => Err(Error::Config(format!(
                "unknown baseline `{other}` (expected knn_gcn or logreg)"
            ))),
        }
    }
}

/// Run a reference classifier with the same splits and epoch loop.
pub fn run_baseline(cfg: &RunConfig, which: Baseline) -> Result<RunReport> {
    let (ds, _) = prepare_dataset(cfg)?;
    let mut report = RunReport::empty("baseline", &ds.name, cfg.seed);
    let start = Instant::now();
    let acc = match which {
        Baseline::KnnGcn => {
            report.baseline = Some("knn_gcn".into());
            baseline_knn_gcn(cfg, &ds)?
        }
        Baseline::LogReg => {
            report.baseline = Some("logreg".into());
            baseline_logreg(cfg, &ds)?
        }
    };
    report.final_test_accuracy = Some(acc);
    report.wall_time_seconds = Some(start.elapsed().as_secs_f64());
    Ok(report)
}

/// Fixed k-NN graph plus a plain 2-layer GCN trained with the same loop,
/// best-validation checkpointing included.
pub fn baseline_knn_gcn(cfg: &RunConfig, ds: &Dataset) -> Result<f64> {
    let (n, f, c) = (ds.n(), ds.f(), ds.c());
    let k = cfg.knn_init_k.min(n.saturating_sub(1)).max(1);
    let a_hat = graph::normalize_adjacency(&graph::knn_graph(&ds.x, k, cfg.knn_metric)?)?;
    let mut rng_init = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_init.set_stream(0);
    let params = SubmoduleParams::init(&mut rng_init, f, cfg.hidden_dim, c, cfg.hop_cutoff);
    let mut w1 = params.w1;
    let mut w2 = params.w2;

    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut optimizer = OptimizerState::new(adam, &[&w1, &w2]);
    let mut rng_drop = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_drop.set_stream(2);

    let forward = |tape: &mut Tape, w1: &Tensor, w2: &Tensor, drop: Option<&Tensor>| -> Result<(NodeId, NodeId, NodeId)> {
        let xn = tape.leaf(ds.x.clone());
        let an = tape.leaf(a_hat.clone());
        let w1n = tape.param(w1.clone());
        let w2n = tape.param(w2.clone());
        let prop1 = tape.graph_matmul(an, xn)?;
        let pre1 = tape.matmul(prop1, w1n)?;
        let h1 = tape.relu(pre1);
        let h1d = match drop {
            Some(mask) => {
                let mn = tape.leaf(mask.clone());
                tape.mul(h1, mn)?
            }
            None => h1,
        };
        let prop2 = tape.graph_matmul(an, h1d)?;
        let pre2 = tape.matmul(prop2, w2n)?;
        let p = tape.row_softmax(pre2)?;
        Ok((p, w1n, w2n))
    };

    let mut best: Option<(f64, f64, Tensor, Tensor)> = None;
    for _epoch in 0..cfg.epochs {
        let mask = (cfg.dropout > 0.0)
            .then(|| dropout_mask(&mut rng_drop, n, cfg.hidden_dim, cfg.dropout));
        let mut tape = Tape::new();
        let (p, w1n, w2n) = forward(&mut tape, &w1, &w2, mask.as_ref())?;
        let loss = tape.masked_cross_entropy(p, &ds.y, &ds.train)?;
        let grads = tape.backward(loss)?;
        let g1 = grads.get_or_zeros(w1n, w1.rows(), w1.cols());
        let g2 = grads.get_or_zeros(w2n, w2.rows(), w2.cols());
        optimizer.step(&mut [&mut w1, &mut w2], &[&g1, &g2])?;
        drop(tape);

        if !ds.val.is_empty() {
            let mut eval_tape = Tape::new();
            let (p, _, _) = forward(&mut eval_tape, &w1, &w2, None)?;
            let acc = evaluate(eval_tape.value(p), &ds.labels, &ds.val)?;
            let ce = masked_ce_value(eval_tape.value(p), &ds.y, &ds.val);
            if improves(best.as_ref().map(|(a, l, ..)| (*a, *l)), acc, ce) {
                best = Some((acc, ce, w1.clone(), w2.clone()));
            }
        }
    }
    if let Some((_, _, bw1, bw2)) = best {
        w1 = bw1;
        w2 = bw2;
    }
    let mut tape = Tape::new();
    let (p, _, _) = forward(&mut tape, &w1, &w2, None)?;
    evaluate(tape.value(p), &ds.labels, &ds.test)
}

/// Multinomial linear classifier on the same splits.
pub fn baseline_logreg(cfg: &RunConfig, ds: &Dataset) -> Result<f64> {
    let (f, c) = (ds.f(), ds.c());
    let mut w = Tensor::zeros(f, c);
    let mut b = Tensor::zeros(1, c);
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut optimizer = OptimizerState::new(adam, &[&w, &b]);
    let forward = |tape: &mut Tape, w: &Tensor, b: &Tensor| -> Result<(NodeId, NodeId, NodeId)> {
        let xn = tape.leaf(ds.x.clone());
        let wn = tape.param(w.clone());
        let bn = tape.param(b.clone());
        let logits = tape.matmul(xn, wn)?;
        let shifted = tape.add(logits, bn)?;
        let p = tape.row_softmax(shifted)?;
        Ok((p, wn, bn))
    };
    let mut best: Option<(f64, f64, Tensor, Tensor)> = None;
    for _epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let (p, wn, bn) = forward(&mut tape, &w, &b)?;
        let loss = tape.masked_cross_entropy(p, &ds.y, &ds.train)?;
        let grads = tape.backward(loss)?;
        let gw = grads.get_or_zeros(wn, f, c);
        let gb = grads.get_or_zeros(bn, 1, c);
        optimizer.step(&mut [&mut w, &mut b], &[&gw, &gb])?;
        if !ds.val.is_empty() {
            let acc = evaluate(tape.value(p), &ds.labels, &ds.val)?;
            let ce = masked_ce_value(tape.value(p), &ds.y, &ds.val);
            if improves(best.as_ref().map(|(a, l, ..)| (*a, *l)), acc, ce) {
                best = Some((acc, ce, w.clone(), b.clone()));
            }
        }
    }
    if let Some((_, _, bw, bb)) = best {
        w = bw;
        b = bb;
    }
    let mut tape = Tape::new();
    let (p, _, _) = forward(&mut tape, &w, &b)?;
    evaluate(tape.value(p), &ds.labels, &ds.test)
}

// ---- sweeps & output ------------------------------------------------------------

/// Apply one sweep override; used by the CLI `sweep` subcommand.
pub fn apply_sweep_value(cfg: &mut RunConfig, param: &str, value: usize) -> Result<()> {
    match param {
        "k" | "top_k" => cfg.top_k = value,
        "m" | "modules" => cfg.modules = value,
        other => {
            return Err(Error::Config(format!(
                "unknown sweep parameter `{other}` (expected k or modules)"
            )))
        }
    }
    cfg.validate()
}

/// Write the report plus any configured exports; returns the report path.
pub fn write_outputs(
    cfg: &RunConfig,
    report: &RunReport,
    model: Option<&TrainedModel>,
    stem: &str,
) -> Result<PathBuf> {
    let dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let report_path = dir.join(format!("{stem}.json"));
    report.write(&report_path)?;
    if let Some(model) = model {
        if cfg.export_features {
            let mut csv = String::from("name,weight\n");
            if let Some(wts) = &report.feature_weights {
                for fw in wts {
                    csv.push_str(&format!("{},{}\n", fw.name, fw.weight));
                }
            }
            let p = dir.join(format!("{stem}_feature_weights.csv"));
            std::fs::write(&p, csv).map_err(|e| Error::io(p.display().to_string(), e))?;
        }
        if cfg.export_graph {
            let el = crate::graph::EdgeList::from_dense(&model.fused_graph);
            el.write_file(dir.join(format!("{stem}_fused_graph.edges")))?;
        }
    }
    Ok(report_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob_config(seed: u64) -> RunConfig {
        RunConfig {
            dataset: DatasetSource::Synthetic {
                synthetic: SyntheticSpec {
                    samples_per_class: 20,
                    classes: 2,
                    informative: 6,
                    noise_features: 2,
                    separation: 6.0,
                    edge_prob: 0.0,
                    seed: 77,
                },
            },
            modules: 2,
            hop_cutoff: 2,
            top_k: 8,
            epochs: 30,
            learning_rate: 0.01,
            mu_l1: 1.0,
            mu_l2: 1.0,
            weight_decay: 5e-4,
            dropout: 0.5,
            hidden_dim: 16,
            knn_init_k: 5,
            knn_metric: KnnMetric::Cosine,
            seed,
            standardize: true,
            val_eval_stride: 1,
            n_train: Some(10),
            n_val: Some(8),
            noise_edges: 0,
            freeze_selection: false,
            freeze_hop_weights: false,
            agg_feature: AggFeatureMode::PrevFused,
            fusion_graph: FusionGraphSource::Sparse,
            export_network: false,
            export_graph: false,
            export_features: false,
            out_dir: None,
            large: false,
        }
    }

    #[test]
    fn evaluate_cases() {
        let labels = vec![0usize, 1, 0];
        let perfect =
            Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        assert_eq!(evaluate(&perfect, &labels, &[0, 1, 2]).unwrap(), 1.0);
        // uniform rows tie toward class 0
        let uniform = Tensor::filled(3, 2, 0.5);
        let acc = evaluate(&uniform, &labels, &[0, 1, 2]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        assert!(evaluate(&uniform, &labels, &[]).is_err());
        // random predictions against a direct loop
        let pred = Tensor::from_rows(&[vec![0.1, 0.7], vec![0.5, 0.2], vec![0.3, 0.3]]).unwrap();
        let mut want = 0;
        for (i, &l) in labels.iter().enumerate() {
            let am = if pred.get(i, 1) > pred.get(i, 0) { 1 } else { 0 };
            if am == l {
                want += 1;
            }
        }
        let got = evaluate(&pred, &labels, &[0, 1, 2]).unwrap();
        assert!((got - want as f64 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_epoch_takes_one_step() {
        let mut cfg = blob_config(3);
        cfg.epochs = 1;
        let (ds, _) = prepare_dataset(&cfg).unwrap();
        // capture the initial parameters
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let initial =
            SubmoduleParams::init(&mut rng, ds.f(), cfg.hidden_dim, ds.c(), cfg.hop_cutoff);
        let (model, report) = train_prepared(&cfg, &ds).unwrap();
        assert_eq!(report.epochs.len(), 1);
        let delta: f64 = model.submodules[0]
            .w1
            .values()
            .iter()
            .zip(initial.w1.values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(delta > 0.0, "parameters must move after one step");
    }

    #[test]
    fn gradients_reach_every_block() {
        let cfg = blob_config(5);
        let (ds, _) = prepare_dataset(&cfg).unwrap();
        let (model, _) = train_prepared(
            &RunConfig { epochs: 1, dropout: 0.0, ..cfg.clone() },
            &ds,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(0);
        let fresh: Vec<SubmoduleParams> = (0..cfg.modules)
            .map(|_| SubmoduleParams::init(&mut rng, ds.f(), cfg.hidden_dim, ds.c(), cfg.hop_cutoff))
            .collect();
        for (trained, init) in model.submodules.iter().zip(&fresh) {
            for (got, want) in [
                (&trained.s, &init.s),
                (&trained.w1, &init.w1),
                (&trained.w2, &init.w2),
                (&trained.v_raw, &init.v_raw),
            ] {
                let delta: f64 = got
                    .values()
                    .iter()
                    .zip(want.values())
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                assert!(delta > 0.0, "a parameter block never received gradient");
            }
        }
    }

    #[test]
    fn determinism_same_seed_bitwise() {
        let cfg = blob_config(9);
        let (_, r1, _) = train(&cfg).unwrap();
        let (_, r2, _) = train(&cfg).unwrap();
        assert_eq!(r1.deterministic_json(), r2.deterministic_json());
    }

    #[test]
    fn best_checkpoint_at_least_final() {
        let cfg = blob_config(11);
        let (_, report, _) = train(&cfg).unwrap();
        let best = report.best_val_accuracy.unwrap();
        let last = report.epochs.last().unwrap().val_accuracy.unwrap();
        assert!(best >= last);
    }

    #[test]
    fn blobs_reach_high_accuracy() {
        let mut cfg = blob_config(1);
        cfg.epochs = 60;
        let (_, report, _) = train(&cfg).unwrap();
        let acc = report.final_test_accuracy.unwrap();
        assert!(acc >= 0.95, "separated blobs should be easy, got {acc}");
    }

    #[test]
    fn loss_trend_decreases() {
        let mut cfg = blob_config(2);
        cfg.epochs = 50;
        let (_, report, _) = train(&cfg).unwrap();
        let first: f64 =
            report.epochs[..10].iter().map(|e| e.loss_total).sum::<f64>() / 10.0;
        let last: f64 =
            report.epochs[40..].iter().map(|e| e.loss_total).sum::<f64>() / 10.0;
        assert!(
            last < first,
            "smoothed loss should fall over 50 epochs: {first} -> {last}"
        );
        for e in &report.epochs {
            assert!(e.loss_total >= 0.0);
        }
    }

    #[test]
    fn denoise_zero_noise_matches_plain_training() {
        let mut cfg = blob_config(4);
        cfg.epochs = 5;
        cfg.dataset = DatasetSource::Synthetic {
            synthetic: SyntheticSpec {
                samples_per_class: 15,
                classes: 2,
                informative: 5,
                noise_features: 0,
                separation: 5.0,
                edge_prob: 0.3,
                seed: 13,
            },
        };
        let (_, plain, _) = train(&cfg).unwrap();
        let (_, denoise, _) = run_denoise(&cfg).unwrap();
        assert_eq!(denoise.noise.as_ref().unwrap().added, 0);
        assert_eq!(denoise.noise.as_ref().unwrap().remaining, 0);
        assert_eq!(plain.final_test_accuracy, denoise.final_test_accuracy);
    }

    #[test]
    fn feature_report_zero_fraction_is_noop() {
        let mut cfg = blob_config(6);
        cfg.epochs = 5;
        let report = run_feature_report(&cfg, 0.0).unwrap();
        let fd = report.feature_deletion.unwrap();
        assert_eq!(fd.deleted_count, 0);
        assert_eq!(fd.baseline_accuracy, fd.low_deleted_accuracy);
        assert_eq!(fd.baseline_accuracy, fd.top_deleted_accuracy);
        assert!(run_feature_report(&cfg, 1.0).is_err());
    }

    #[test]
    fn logreg_separable_is_near_perfect() {
        let mut cfg = blob_config(8);
        cfg.epochs = 300;
        let (ds, _) = prepare_dataset(&cfg).unwrap();
        let acc = baseline_logreg(&cfg, &ds).unwrap();
        assert!(acc >= 0.99, "separable blobs, logreg got {acc}");
    }

    #[test]
    fn report_schema_is_stable() {
        let mut cfg = blob_config(10);
        cfg.epochs = 2;
        let (_, report, _) = train(&cfg).unwrap();
        let json = report.deterministic_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in [
            "mode",
            "dataset",
            "seed",
            "baseline",
            "epochs",
            "best_epoch",
            "best_val_accuracy",
            "final_test_accuracy",
            "wall_time_seconds",
            "noise",
            "feature_weights",
            "feature_deletion",
        ] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        assert!(v["wall_time_seconds"].is_null());
        assert!(v["noise"].is_null());
    }

    #[test]
    fn sweep_values_apply() {
        let mut cfg = blob_config(0);
        apply_sweep_value(&mut cfg, "k", 17).unwrap();
        assert_eq!(cfg.top_k, 17);
        apply_sweep_value(&mut cfg, "modules", 4).unwrap();
        assert_eq!(cfg.modules, 4);
        assert!(apply_sweep_value(&mut cfg, "lr", 1).is_err());
    }
}
