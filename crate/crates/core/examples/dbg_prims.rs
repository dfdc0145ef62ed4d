use glgnn_core::fastmath;
use glgnn_core::tensor::Tensor;
use std::time::Instant;

fn bench(label: &str, reps: usize, mut f: impl FnMut() -> f64) {
    let mut acc = 0.0;
    acc += f();
    let t = Instant::now();
    for _ in 0..reps {
        acc += f();
    }
    println!(
        "{label:28} {:9.3} ms   (acc {acc:.1})",
        t.elapsed().as_secs_f64() * 1000.0 / reps as f64
    );
}

fn main() {
    glgnn_core::runtime::init();
    let n = 1797usize;
    let len = n * n;
    let src = Tensor::from_fn(n, n, |i, j| ((i * 7 + j) % 13) as f64 * 0.1 - 0.4);
    let reps = 20;

    bench("zeros 26MB", reps, || {
        let t = Tensor::zeros(n, n);
        t.values()[17]
    });
    bench("clone 26MB", reps, || {
        let t = src.clone();
        t.values()[17]
    });
    let mut buf = vec![0.0f64; len];
    bench("fill in place", reps, || {
        buf.fill(0.25);
        buf[17]
    });
    bench("read sum", reps, || src.values().iter().sum::<f64>());
    bench("exp_slice 3.2M", reps, || {
        let mut b2 = src.values().to_vec();
        fastmath::exp_slice(&mut b2);
        b2[17]
    });
    let mut b3 = src.values().to_vec();
    bench("exp_slice in place", reps, || {
        for v in b3.iter_mut() {
            *v = -(*v).abs();
        }
        fastmath::exp_slice(&mut b3);
        b3[17]
    });
    bench("row max scan", reps, || {
        let mut acc = 0.0;
        for i in 0..n {
            acc += src.row(i).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        }
        acc
    });
    // softmax row loop like relation_topk's
    let mut dstt = Tensor::zeros(n, n);
    bench("softmax rows full", reps, || {
        for i in 0..n {
            let s = src.row(i);
            let d = dstt.row_mut(i);
            let max = s.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            for (dv, &sv) in d.iter_mut().zip(s) {
                *dv = sv - max;
            }
            fastmath::exp_slice(d);
            let sum: f64 = d.iter().sum();
            let inv = 1.0 / sum;
            for dv in d.iter_mut() {
                *dv *= inv;
            }
        }
        dstt.get(0, 0)
    });
}
