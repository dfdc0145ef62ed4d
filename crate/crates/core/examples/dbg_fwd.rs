use glgnn_core::data;
use glgnn_core::graph::KnnMetric;
use glgnn_core::model::*;
use glgnn_core::runner::{prepare_dataset, DatasetSource, RunConfig};
use glgnn_core::tape::Tape;
use glgnn_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let cfg = RunConfig {
        dataset: DatasetSource::Manifest { manifest: "data/digits.manifest.json".into() },
        top_k: 15,
        ..serde_json::from_str::<RunConfig>(
            r#"{"dataset":{"manifest":"data/digits.manifest.json"}}"#,
        )
        .unwrap()
    };
    let (ds, _) = prepare_dataset(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = SubmoduleParams::init(&mut rng, ds.f(), 32, ds.c(), 2);
    let state = SubmoduleState::init(&ds.x, None, 10, KnnMetric::Cosine, 2).unwrap();
    let y_masked = masked_labels(&ds.y, &ds.train);
    let drop = dropout_mask(&mut rng, ds.n(), 32, 0.5);

    for rep in 0..3 {
        let mut tape = Tape::new();
        let t0 = Instant::now();
        let x = tape.leaf(ds.x.clone());
        let y = tape.leaf(y_masked.clone());
        let ids = register_submodule(&mut tape, &params, false, false);
        let t1 = Instant::now();
        let xs = select_features(&mut tape, x, ids.s).unwrap();
        let z = concat_labels(&mut tape, xs, y).unwrap();
        let t2 = Instant::now();
        let t3 = Instant::now();
        let a = tape.relation_graph_topk(z, ids.v_tilde, &state.hops, 15).unwrap();
        let t4 = Instant::now();
        let an = tape.sym_norm(a).unwrap();
        let t5 = Instant::now();
        let p1 = tape.graph_matmul(an, xs).unwrap();
        let pre1 = tape.matmul(p1, ids.w1).unwrap();
        let h1 = tape.relu(pre1);
        let t6 = Instant::now();
        let z1 = concat_labels(&mut tape, h1, y).unwrap();
        let t7 = Instant::now();
        let a1 = tape.gram_topk(z1, 15).unwrap();
        let t8 = Instant::now();
        let a1n = tape.sym_norm(a1).unwrap();
        let t9 = Instant::now();
        let dm = tape.leaf(drop.clone());
        let h1d = tape.mul(h1, dm).unwrap();
        let p2 = tape.graph_matmul(an, h1d).unwrap();
        let pre2 = tape.matmul(p2, ids.w2).unwrap();
        let x2 = tape.row_softmax(pre2).unwrap();
        let t10 = Instant::now();
        let _ = (a1n, x2);
        if rep > 0 {
            println!(
                "leaf/reg {:5.1} sel/cat {:5.1} gram {:5.1} relation {:5.1} symnorm {:5.1} layer1 {:5.1} gram1 {:5.1} topk1 {:5.1} symnorm1 {:5.1} layer2 {:5.1}  total {:5.1} ms",
                ms(t0, t1), ms(t1, t2), ms(t2, t3), ms(t3, t4), ms(t4, t5),
                ms(t5, t6), ms(t6, t7), ms(t7, t8), ms(t8, t9), ms(t9, t10),
                ms(t0, t10)
            );
        }
    }
    let _ = data::SyntheticSpec { samples_per_class: 1, classes: 2, informative: 1, noise_features: 0, separation: 0.0, edge_prob: 0.0, seed: 0 };
}

fn ms(a: Instant, b: Instant) -> f64 {
    (b - a).as_secs_f64() * 1000.0
}
