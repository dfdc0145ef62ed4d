//! Dataset ingestion, transductive split construction, feature
//! standardization, and synthetic generators for offline experiments.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::EdgeList;
use crate::tensor::Tensor;

/// Features, one-hot labels, disjoint transductive masks, and an optional
/// external graph over the samples.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub graph: Option<EdgeList>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn f(&self) -> usize {
        self.x.cols()
    }

    pub fn c(&self) -> usize {
        self.y.cols()
    }

    fn from_parts(name: &str, x: Tensor, labels: Vec<usize>, names: Vec<String>) -> Result<Self> {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        if classes < 2 {
            return Err(Error::invalid(format!(
                "dataset {name} has {classes} classes; at least 2 are required"
            )));
        }
        if x.cols() == 0 {
            return Err(Error::invalid(format!("dataset {name} has no features")));
        }
        let y = Tensor::from_fn(x.rows(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
        Ok(Dataset {
            name: name.to_string(),
            x,
            y,
            labels,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            graph: None,
            feature_names: names,
        })
    }
}

// ---- CSV ----------------------------------------------------------------

/// Load a numeric feature CSV and an integer label file (one label per row).
/// Labels map to 0..C-1 in first-appearance order.
pub fn load_csv(
    features_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    has_header: bool,
) -> Result<Dataset> {
    let fpath = features_path.as_ref();
    let ftext =
        std::fs::read_to_string(fpath).map_err(|e| Error::io(fpath.display().to_string(), e))?;
    let forigin = fpath.display().to_string();

    let mut lines = ftext.lines().enumerate();
    let mut names: Vec<String> = Vec::new();
    if has_header {
        if let Some((_, header)) = lines.next() {
            names = header.split(',').map(|s| s.trim().to_string()).collect();
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in lines {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for cell in line.split(',') {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::parse(&forigin, lineno + 1, format!("non-numeric cell `{}`", cell.trim()))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::parse(
                    &forigin,
                    lineno + 1,
                    format!("ragged row: {} cells, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(&forigin, 1, "no data rows"));
    }
    let f = rows[0].len();
    if names.len() != f {
        names = (0..f).map(|j| format!("f{j}")).collect();
    }
    let x = Tensor::from_rows(&rows)?;

    let lpath = labels_path.as_ref();
    let ltext =
        std::fs::read_to_string(lpath).map_err(|e| Error::io(lpath.display().to_string(), e))?;
    let lorigin = lpath.display().to_string();
    let mut raw_labels: Vec<i64> = Vec::new();
    for (lineno, raw) in ltext.lines().enumerate() {
        if has_header && lineno == 0 {
            continue;
        }
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let v: i64 = line
            .parse()
            .map_err(|_| Error::parse(&lorigin, lineno + 1, format!("non-integer label `{line}`")))?;
        raw_labels.push(v);
    }
    if raw_labels.len() != x.rows() {
        return Err(Error::parse(
            &lorigin,
            raw_labels.len() + 1,
            format!("{} labels for {} feature rows", raw_labels.len(), x.rows()),
        ));
    }
    // first-appearance order
    let mut order: Vec<i64> = Vec::new();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|l| match order.iter().position(|o| o == l) {
            Some(idx) => idx,
            None => {
                order.push(*l);
                order.len() - 1
            }
        })
        .collect();

    let stem = fpath.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    Dataset::from_parts(&stem, x, labels, names)
}

/// Write features (with header) and labels; inverse of `load_csv` with
/// `has_header = true` up to the label alphabet.
pub fn write_csv(
    ds: &Dataset,
    features_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let mut ftext = ds.feature_names.join(",");
    ftext.push('\n');
    for i in 0..ds.n() {
        let row: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v}")).collect();
        ftext.push_str(&row.join(","));
        ftext.push('\n');
    }
    let fpath = features_path.as_ref();
    std::fs::write(fpath, ftext).map_err(|e| Error::io(fpath.display().to_string(), e))?;
    let mut ltext = String::from("label\n");
    for &l in &ds.labels {
        ltext.push_str(&format!("{l}\n"));
    }
    let lpath = labels_path.as_ref();
    std::fs::write(lpath, ltext).map_err(|e| Error::io(lpath.display().to_string(), e))
}

// ---- manifests -----------------------------------------------------------

/// File-based dataset description; paths are relative to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub features: String,
    pub labels: String,
    #[serde(default)]
    pub graph: Option<String>,
    #[serde(default = "default_true")]
    pub has_header: bool,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

fn default_true() -> bool {
    true
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<(DatasetManifest, Dataset)> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let mut ds = load_csv(resolve(&manifest.features), resolve(&manifest.labels), manifest.has_header)?;
    ds.name = manifest.name.clone();
    if let Some(g) = &manifest.graph {
        let mut el = EdgeList::read_file(resolve(g))?;
        if el.n_nodes > ds.n() {
            return Err(Error::invalid(format!(
                "graph references node {} but dataset has {} samples",
                el.n_nodes - 1,
                ds.n()
            )));
        }
        el.n_nodes = ds.n();
        ds.graph = Some(el);
    }
    Ok((manifest, ds))
}

// ---- splits ----------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    /// Test mask is whatever remains after train and validation.
    Remainder,
    /// Error unless the requested triple covers the dataset exactly.
    Strict { n_test: usize },
}

/// Stratified-as-possible random masks: train/validation counts are spread
/// over the classes proportionally (every class keeps at least one training
/// sample), the remainder becomes the test set. Reproducible per seed.
pub fn make_splits(
    ds: &Dataset,
    n_train: usize,
    n_val: usize,
    seed: u64,
    mode: SplitMode,
) -> Result<Dataset> {
    let n = ds.n();
    let c = ds.c();
    if let SplitMode::Strict { n_test } = mode {
        if n_train + n_val + n_test != n {
            return Err(Error::invalid(format!(
                "strict split {n_train}/{n_val}/{n_test} sums to {} but the dataset has {n} samples",
                n_train + n_val + n_test
            )));
        }
    }
    if n_train + n_val > n {
        return Err(Error::invalid(format!(
            "split sizes {n_train}+{n_val} exceed {n} samples"
        )));
    }
    if n_train < c {
        return Err(Error::invalid(format!(
            "{n_train} training samples cannot cover {c} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if by_class.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("every class needs at least one sample"));
    }
    for group in by_class.iter_mut() {
        group.shuffle(&mut rng);
    }
    let sizes: Vec<usize> = by_class.iter().map(|g| g.len()).collect();
    let train_quota = apportion(&sizes, n_train, 1)?;
    let remaining: Vec<usize> = sizes.iter().zip(&train_quota).map(|(s, q)| s - q).collect();
    let val_quota = apportion(&remaining, n_val, 0)?;

    let mut train = Vec::with_capacity(n_train);
    let mut val = Vec::with_capacity(n_val);
    let mut test = Vec::new();
    for (ci, group) in by_class.iter().enumerate() {
        let t = train_quota[ci];
        let v = val_quota[ci];
        train.extend_from_slice(&group[..t]);
        val.extend_from_slice(&group[t..t + v]);
        test.extend_from_slice(&group[t + v..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    let mut out = ds.clone();
    out.train = train;
    out.val = val;
    out.test = test;
    Ok(out)
}

/// Largest-remainder apportionment of `total` over groups with capacities
/// `sizes`, each group receiving at least `min_each` (when its capacity
/// allows; infeasible combinations error).
fn apportion(sizes: &[usize], total: usize, min_each: usize) -> Result<Vec<usize>> {
    let cap: usize = sizes.iter().sum();
    if total > cap {
        return Err(Error::invalid(format!(
            "cannot draw {total} samples from {cap} available"
        )));
    }
    let mut quota = vec![0usize; sizes.len()];
    if total == 0 {
        return Ok(quota);
    }
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(sizes.len());
    let mut assigned = 0usize;
    for (i, &s) in sizes.iter().enumerate() {
        let exact = total as f64 * s as f64 / cap as f64;
        quota[i] = (exact.floor() as usize).min(s);
        assigned += quota[i];
        fracs.push((exact - exact.floor(), i));
    }
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut cursor = 0;
    while assigned < total {
        let (_, i) = fracs[cursor % fracs.len()];
        cursor += 1;
        if quota[i] < sizes[i] {
            quota[i] += 1;
            assigned += 1;
        }
    }
    // enforce the per-class minimum by stealing from the largest quota
    if min_each > 0 {
        for i in 0..sizes.len() {
            while quota[i] < min_each.min(sizes[i]) {
                let donor = quota
                    .iter()
                    .enumerate()
                    .filter(|&(j, &q)| j != i && q > min_each)
                    .max_by_key(|&(_, &q)| q)
                    .map(|(j, _)| j)
                    .ok_or_else(|| Error::invalid("split infeasible: cannot cover every class"))?;
                quota[donor] -= 1;
                quota[i] += 1;
            }
        }
    }
    Ok(quota)
}

// ---- standardization --------------------------------------------------------

/// Rescale every feature column to zero mean and unit variance using
/// statistics from the training rows only (all rows when no split exists).
/// Zero-variance columns are centered and left unscaled.
pub fn standardize(ds: &Dataset) -> Dataset {
    let rows: Vec<usize> =
        if ds.train.is_empty() { (0..ds.n()).collect() } else { ds.train.clone() };
    let m = rows.len() as f64;
    let f = ds.f();
    let mut mean = vec![0.0; f];
    for &i in &rows {
        for (acc, &v) in mean.iter_mut().zip(ds.x.row(i)) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut var = vec![0.0; f];
    for &i in &rows {
        for ((acc, &v), &mu) in var.iter_mut().zip(ds.x.row(i)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let mut out = ds.clone();
    let scale: Vec<f64> =
        var.iter().map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    for i in 0..ds.n() {
        for ((v, &mu), &s) in out.x.row_mut(i).iter_mut().zip(&mean).zip(&scale) {
            *v = (*v - mu) * s;
        }
    }
    out
}

// ---- synthetic data ----------------------------------------------------------

/// Gaussian class clusters on the informative dimensions with pure-noise
/// dimensions appended, plus an optional planted intra-class graph.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples_per_class: usize,
    pub classes: usize,
    pub informative: usize,
    #[serde(default)]
    pub noise_features: usize,
    pub separation: f64,
    /// Probability of an edge between two samples of the same class.
    #[serde(default)]
    pub edge_prob: f64,
    pub seed: u64,
}

/// Ground truth handed back with a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthTruth {
    pub informative_dims: Vec<usize>,
    pub centroids: Tensor,
    pub planted_graph: EdgeList,
}

/// Class centroids are sign patterns scaled to +-separation/2 on every
/// informative dimension, so each informative dimension carries signal for
/// any pair of classes that differ there. Patterns are redrawn (bounded)
/// until distinct.
pub fn synth(spec: &SyntheticSpec) -> Result<(Dataset, SynthTruth)> {
    if spec.samples_per_class < 1 || spec.classes < 2 || spec.informative < 1 {
        return Err(Error::invalid(
            "synthetic spec needs samples_per_class >= 1, classes >= 2, informative >= 1",
        ));
    }
    let n = spec.samples_per_class * spec.classes;
    let f = spec.informative + spec.noise_features;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(4);

    let half = spec.separation / 2.0;
    let mut centroids = Tensor::zeros(spec.classes, spec.informative);
    let mut seen: Vec<Vec<i8>> = Vec::new();
    for cls in 0..spec.classes {
        let mut pattern: Vec<i8> = Vec::new();
        for attempt in 0..100 {
            pattern = (0..spec.informative)
                .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
                .collect();
            if !seen.contains(&pattern) || attempt == 99 {
                break;
            }
        }
        for (j, &s) in pattern.iter().enumerate() {
            centroids.set(cls, j, half * s as f64);
        }
        seen.push(pattern);
    }

    let mut normal = || -> f64 {
        // Box-Muller on uniforms open at zero
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let mut x = Tensor::zeros(n, f);
    let mut labels = Vec::with_capacity(n);
    for cls in 0..spec.classes {
        for s in 0..spec.samples_per_class {
            let i = cls * spec.samples_per_class + s;
            labels.push(cls);
            for j in 0..spec.informative {
                x.set(i, j, centroids.get(cls, j) + normal());
            }
            for j in spec.informative..f {
                x.set(i, j, normal());
            }
        }
    }

    let mut planted = EdgeList::new(n);
    if spec.edge_prob > 0.0 {
        for i in 0..n {
            for j in (i + 1)..n {
                if labels[i] == labels[j] && rng.gen::<f64>() < spec.edge_prob {
                    planted.add(i, j, 1.0)?;
                }
            }
        }
    }

    let names = (0..f)
        .map(|j| if j < spec.informative { format!("inf{j}") } else { format!("noise{j}") })
        .collect();
    let mut ds = Dataset::from_parts("synthetic", x, labels, names)?;
    if !planted.is_empty() {
        ds.graph = Some(planted.clone());
    }
    let truth = SynthTruth {
        informative_dims: (0..spec.informative).collect(),
        centroids,
        planted_graph: planted,
    };
    Ok((ds, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let x = Tensor::from_fn(12, 3, |i, j| (i * 3 + j) as f64);
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        Dataset::from_parts("toy", x, labels, vec!["a".into(), "b".into(), "c".into()]).unwrap()
    }

    #[test]
    fn one_hot_from_labels() {
        let ds = toy();
        assert_eq!(ds.c(), 2);
        for i in 0..ds.n() {
            let ones: f64 = ds.y.row(i).iter().sum();
            assert_eq!(ones, 1.0);
            assert_eq!(ds.y.get(i, ds.labels[i]), 1.0);
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let ds = toy();
        let split = make_splits(&ds, 4, 3, 11, SplitMode::Remainder).unwrap();
        assert_eq!(split.train.len(), 4);
        assert_eq!(split.val.len(), 3);
        assert_eq!(split.test.len(), 5);
        let mut all: Vec<usize> =
            split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        // every class in train
        for c in 0..2 {
            assert!(split.train.iter().any(|&i| ds.labels[i] == c));
        }
    }

    #[test]
    fn splits_deterministic_per_seed() {
        let ds = toy();
        let a = make_splits(&ds, 4, 3, 7, SplitMode::Remainder).unwrap();
        let b = make_splits(&ds, 4, 3, 7, SplitMode::Remainder).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        let c = make_splits(&ds, 4, 3, 8, SplitMode::Remainder).unwrap();
        assert!(a.train != c.train || a.val != c.val);
    }

    #[test]
    fn split_boundary_all_train() {
        let ds = toy();
        let split = make_splits(&ds, 12, 0, 1, SplitMode::Remainder).unwrap();
        assert_eq!(split.train.len(), 12);
        assert!(split.test.is_empty());
    }

    #[test]
    fn strict_mode_checks_total() {
        let ds = toy();
        assert!(make_splits(&ds, 4, 3, 1, SplitMode::Strict { n_test: 5 }).is_ok());
        // the Wine paper triple 10/20/158 does not sum to 178; analogous case
        assert!(make_splits(&ds, 4, 3, 1, SplitMode::Strict { n_test: 6 }).is_err());
    }

    #[test]
    fn infeasible_splits_error() {
        let ds = toy();
        assert!(make_splits(&ds, 1, 0, 0, SplitMode::Remainder).is_err()); // n_train < C
        assert!(make_splits(&ds, 10, 5, 0, SplitMode::Remainder).is_err());
    }

    #[test]
    fn standardize_train_stats_only() {
        let mut ds = toy();
        ds.train = vec![0, 1, 2, 3];
        ds.test = (4..12).collect();
        let out = standardize(&ds);
        // training-column mean ~ 0
        for j in 0..ds.f() {
            let mean: f64 = ds.train.iter().map(|&i| out.x.get(i, j)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-10);
        }
        // permuting test rows does not change the transform
        let mut permuted = ds.clone();
        let last = permuted.x.rows() - 1;
        for j in 0..permuted.f() {
            let a = permuted.x.get(4, j);
            let b = permuted.x.get(last, j);
            permuted.x.set(4, j, b);
            permuted.x.set(last, j, a);
        }
        let out2 = standardize(&permuted);
        for &i in &ds.train {
            for j in 0..ds.f() {
                assert_eq!(out.x.get(i, j), out2.x.get(i, j));
            }
        }
    }

    #[test]
    fn standardize_constant_column_centers() {
        let x = Tensor::from_fn(4, 2, |i, j| if j == 0 { 5.0 } else { i as f64 });
        let ds =
            Dataset::from_parts("c", x, vec![0, 1, 0, 1], vec!["k".into(), "v".into()]).unwrap();
        let out = standardize(&ds);
        for i in 0..4 {
            assert_eq!(out.x.get(i, 0), 0.0);
        }
    }

    #[test]
    fn standardize_idempotent_on_train() {
        let mut ds = toy();
        ds.train = (0..12).collect();
        let once = standardize(&ds);
        let twice = standardize(&once);
        for i in 0..ds.n() {
            for j in 0..ds.f() {
                assert!((once.x.get(i, j) - twice.x.get(i, j)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn synth_shapes_and_truth() {
        let spec = SyntheticSpec {
            samples_per_class: 10,
            classes: 3,
            informative: 4,
            noise_features: 0,
            separation: 5.0,
            edge_prob: 0.0,
            seed: 9,
        };
        let (ds, truth) = synth(&spec).unwrap();
        assert_eq!(ds.n(), 30);
        assert_eq!(ds.f(), 4); // zero noise features: F = informative
        assert_eq!(truth.informative_dims, vec![0, 1, 2, 3]);
        assert!(ds.graph.is_none());
    }

    #[test]
    fn synth_nearest_centroid_oracle() {
        let spec = SyntheticSpec {
            samples_per_class: 40,
            classes: 2,
            informative: 10,
            noise_features: 0,
            separation: 6.0,
            edge_prob: 0.0,
            seed: 1,
        };
        let (ds, truth) = synth(&spec).unwrap();
        let mut correct = 0;
        for i in 0..ds.n() {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..2 {
                let d: f64 = ds
                    .x
                    .row(i)
                    .iter()
                    .zip(truth.centroids.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.n() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn synth_zero_separation_near_chance() {
        let spec = SyntheticSpec {
            samples_per_class: 150,
            classes: 2,
            informative: 3,
            noise_features: 0,
            separation: 0.0,
            edge_prob: 0.0,
            seed: 2,
        };
        let (ds, truth) = synth(&spec).unwrap();
        let mut correct = 0;
        for i in 0..ds.n() {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..2 {
                let d: f64 = ds
                    .x
                    .row(i)
                    .iter()
                    .zip(truth.centroids.row(c))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.n() as f64;
        assert!((0.35..=0.65).contains(&acc), "expected chance-level accuracy, got {acc}");
    }

    #[test]
    fn synth_planted_graph_is_intra_class() {
        let spec = SyntheticSpec {
            samples_per_class: 15,
            classes: 2,
            informative: 3,
            noise_features: 0,
            separation: 4.0,
            edge_prob: 0.4,
            seed: 3,
        };
        let (ds, truth) = synth(&spec).unwrap();
        assert!(!truth.planted_graph.is_empty());
        for &(s, d, _) in &truth.planted_graph.edges {
            assert_eq!(ds.labels[s], ds.labels[d]);
        }
    }

    #[test]
    fn csv_round_trip_identical_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            samples_per_class: 6,
            classes: 2,
            informative: 3,
            noise_features: 1,
            separation: 2.5,
            edge_prob: 0.5,
            seed: 5,
        };
        let (ds, _) = synth(&spec).unwrap();
        let f = dir.path().join("x.csv");
        let l = dir.path().join("y.csv");
        write_csv(&ds, &f, &l).unwrap();
        let back = load_csv(&f, &l, true).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.labels, ds.labels);
        // graph round trip
        let gpath = dir.path().join("g.edges");
        let graph = ds.graph.clone().unwrap();
        graph.write_file(&gpath).unwrap();
        let gback = EdgeList::read_file(&gpath).unwrap();
        assert_eq!(gback.edges, graph.edges);
    }

    #[test]
    fn missing_file_is_descriptive() {
        let err = load_csv("/nonexistent/x.csv", "/nonexistent/y.csv", true).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.csv"));
    }
}
