use glgnn_core::data::SyntheticSpec;
use glgnn_core::graph::KnnMetric;
use glgnn_core::model::FusionGraphSource;
use glgnn_core::network::AggFeatureMode;
use glgnn_core::runner::*;

fn cfg_base(seed: u64, agg: AggFeatureMode) -> RunConfig {
    RunConfig {
        dataset: DatasetSource::Synthetic {
            synthetic: SyntheticSpec {
                samples_per_class: 40,
                classes: 2,
                informative: 6,
                noise_features: 2,
                separation: 6.0,
                edge_prob: 0.0,
                seed: 77,
            },
        },
        modules: 3,
        hop_cutoff: 2,
        top_k: 10,
        epochs: 200,
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
        n_train: Some(10),
        n_val: Some(20),
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
    for agg in [AggFeatureMode::PrevFused, AggFeatureMode::MeanOutputs, AggFeatureMode::FreeParam] {
        let mut accs = Vec::new();
        for seed in 1u64..=5 {
            let cfg = cfg_base(seed, agg);
            let (_, report, _) = train(&cfg).unwrap();
            accs.push(report.final_test_accuracy.unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("{agg:?}: accs {accs:?} mean {mean:.3}");
    }
}
