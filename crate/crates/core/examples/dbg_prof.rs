use glgnn_core::graph::KnnMetric;
use glgnn_core::model::FusionGraphSource;
use glgnn_core::network::AggFeatureMode;
use glgnn_core::runner::*;
use std::time::Instant;

fn main() {
    let cfg = RunConfig {
        dataset: DatasetSource::Manifest { manifest: "data/wine.manifest.json".into() },
        modules: 3,
        hop_cutoff: 2,
        top_k: 90,
        epochs: 50,
        learning_rate: 0.01,
        mu_l1: 1.0,
        mu_l2: 1.0,
        weight_decay: 5e-4,
        dropout: 0.5,
        hidden_dim: 32,
        knn_init_k: 10,
        knn_metric: KnnMetric::Cosine,
        seed: 0,
        standardize: true,
        val_eval_stride: 1,
        n_train: None,
        n_val: None,
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
    };
    let t0 = Instant::now();
    let (_, report, _) = train(&cfg).unwrap();
    let dt = t0.elapsed();
    println!(
        "50 epochs in {dt:?} -> {:.1} ms/epoch, test {:?}",
        dt.as_secs_f64() * 1000.0 / 50.0,
        report.final_test_accuracy
    );
}
