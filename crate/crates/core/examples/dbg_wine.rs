use glgnn_core::graph::KnnMetric;
use glgnn_core::model::FusionGraphSource;
use glgnn_core::network::AggFeatureMode;
use glgnn_core::runner::*;
use std::time::Instant;

pub fn wine_cfg(seed: u64, agg: AggFeatureMode) -> RunConfig {
    RunConfig {
        dataset: DatasetSource::Manifest { manifest: "data/wine.manifest.json".into() },
        modules: 3,
        hop_cutoff: 2,
        top_k: 90,
        epochs: 1000,
        learning_rate: 0.01,
        mu_l1: 1.0,
        mu_l2: 1.0,
        weight_decay: 5e-4,
        dropout: 0.5,
        hidden_dim: 32,
        knn_init_k: 10,
        knn_metric: KnnMetric::Cosine,
        seed,
        standardize: true,
        val_eval_stride: 1,
        n_train: None,
        n_val: None,
        noise_edges: 0,
        freeze_selection: false,
        freeze_hop_weights: false,
        agg_feature: agg,
        fusion_graph: FusionGraphSource::Sparse,
        export_network: false,
        export_graph: false,
        export_features: false,
        out_dir: None,
        large: false,
    }
}

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let t0 = Instant::now();
    for agg in [AggFeatureMode::PrevFused, AggFeatureMode::MeanOutputs] {
        let mut accs = Vec::new();
        let mut kaccs = Vec::new();
        for seed in 0..seeds {
            let cfg = wine_cfg(seed, agg);
            let (_, report, ds) = train(&cfg).unwrap();
            accs.push(report.final_test_accuracy.unwrap() * 100.0);
            kaccs.push(baseline_knn_gcn(&cfg, &ds).unwrap() * 100.0);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let kmean = kaccs.iter().sum::<f64>() / kaccs.len() as f64;
        println!("{agg:?}: gl {accs:?} mean {mean:.1}");
        println!("   knngcn {kaccs:?} mean {kmean:.1}");
    }
    println!("elapsed {:?}", t0.elapsed());
}
