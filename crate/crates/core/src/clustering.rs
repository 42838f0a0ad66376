//! Lloyd's k-means with k-means++ seeding, frame label propagation and
//! cluster composition (purity) reports.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json, write_text};
use crate::tensor_io::{FeatureMatrix, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Standardize every feature column to zero mean and unit variance first.
    pub standardize: bool,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            seed,
            max_iters: 300,
            tol: 1e-4,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    /// Inertia after every assignment step, starting with the seeding.
    #[serde(default)]
    pub inertia_history: Vec<f64>,
    #[serde(default)]
    pub standardized: bool,
}

impl ClusterModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let model: ClusterModel = read_json(path)?;
        if model.k == 0 || model.centroids.len() != model.k {
            return Err(Error::Validation(format!(
                "{}: k = {} but {} centroids",
                path.display(),
                model.k,
                model.centroids.len()
            )));
        }
        if let Some(&bad) = model.assignments.iter().find(|&&a| a as usize >= model.k) {
            return Err(Error::Validation(format!(
                "{}: assignment {bad} out of range for k = {}",
                path.display(),
                model.k
            )));
        }
        Ok(model)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a as usize] += 1;
        }
        sizes
    }
}

/// Row-major `n x dim` points in f64.
struct Points {
    data: Vec<f64>,
    dim: usize,
}

impl Points {
    fn from_features(features: &FeatureMatrix, standardize: bool) -> Self {
        let dim = features.cols();
        let mut data: Vec<f64> = features.data().iter().map(|&v| v as f64).collect();
        if standardize {
            let n = features.rows() as f64;
            for c in 0..dim {
                let mean = data.iter().skip(c).step_by(dim).sum::<f64>() / n;
                let var = data
                    .iter()
                    .skip(c)
                    .step_by(dim)
                    .map(|v| (v - mean) * (v - mean))
                    .sum::<f64>()
                    / n;
                let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
                for v in data.iter_mut().skip(c).step_by(dim) {
                    *v = (*v - mean) / sd;
                }
            }
        }
        Points { data, dim }
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid for every point (ties to the lowest cluster index) and the
/// squared distance to it.
fn assign(points: &Points, centroids: &[Vec<f64>]) -> (Vec<u32>, Vec<f64>) {
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let x = points.row(i);
            let mut best = (0u32, f64::INFINITY);
            for (c, centroid) in centroids.iter().enumerate() {
                let d = squared_distance(x, centroid);
                if d < best.1 {
                    best = (c as u32, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_plus_plus(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    let first = rng.gen_range(0..n);
    let mut centroids = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| squared_distance(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Parameter(format!(
                "k = {k} exceeds the number of distinct points"
            )));
        }
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total implies a positive weight");
        let c = points.row(pick).to_vec();
        for (i, w) in d2.iter_mut().enumerate() {
            *w = w.min(squared_distance(points.row(i), &c));
        }
        centroids.push(c);
    }
    Ok(centroids)
}

/// Moves the farthest point of a multi-member cluster into every empty
/// cluster, then reassigns. Only lowers inertia.
fn repair_empty(
    points: &Points,
    centroids: &mut [Vec<f64>],
    assignments: &mut Vec<u32>,
    dists: &mut Vec<f64>,
) -> Result<()> {
    let k = centroids.len();
    for _ in 0..4 * k + 4 {
        let mut sizes = vec![0usize; k];
        for &a in assignments.iter() {
            sizes[a as usize] += 1;
        }
        let empty: Vec<usize> = (0..k).filter(|&c| sizes[c] == 0).collect();
        if empty.is_empty() {
            return Ok(());
        }
        for c in empty {
            let mut far: Option<(usize, f64)> = None;
            for (i, &d) in dists.iter().enumerate() {
                if sizes[assignments[i] as usize] >= 2 && far.is_none_or(|(_, best)| d > best) {
                    far = Some((i, d));
                }
            }
            let (i, _) =
                far.ok_or_else(|| Error::Data("cannot repair empty cluster: every cluster is a singleton".into()))?;
            sizes[assignments[i] as usize] -= 1;
            sizes[c] += 1;
            assignments[i] = c as u32;
            dists[i] = 0.0;
            centroids[c] = points.row(i).to_vec();
        }
        let (a, d) = assign(points, centroids);
        *assignments = a;
        *dists = d;
    }
    Err(Error::Data("empty-cluster repair did not converge".into()))
}

fn means(points: &Points, assignments: &[u32], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; points.dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a as usize] += 1;
        for (s, v) in sums[a as usize].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            for v in s.iter_mut() {
                *v /= n as f64;
            }
        }
    }
    sums
}

fn lloyd(points: &Points, mut centroids: Vec<Vec<f64>>, params: &KMeansParams) -> Result<ClusterModel> {
    let k = centroids.len();
    let (mut assignments, mut dists) = assign(points, &centroids);
    repair_empty(points, &mut centroids, &mut assignments, &mut dists)?;
    let mut history = vec![dists.iter().sum::<f64>()];
    for _ in 0..params.max_iters {
        let updated = means(points, &assignments, k);
        let movement = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let (a, d) = assign(points, &centroids);
        assignments = a;
        dists = d;
        repair_empty(points, &mut centroids, &mut assignments, &mut dists)?;
        history.push(dists.iter().sum::<f64>());
        if movement < params.tol {
            break;
        }
    }
    Ok(ClusterModel {
        k,
        seed: params.seed,
        centroids,
        assignments,
        inertia: *history.last().expect("history is non-empty"),
        inertia_history: history,
        standardized: params.standardize,
    })
}

fn check_params(features: &FeatureMatrix, params: &KMeansParams) -> Result<()> {
    if params.k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if features.rows() < params.k {
        return Err(Error::Parameter(format!(
            "k = {} exceeds the number of items ({})",
            params.k,
            features.rows()
        )));
    }
    if !(params.tol >= 0.0) {
        return Err(Error::Parameter(format!(
            "tol must be non-negative, got {}",
            params.tol
        )));
    }
    if let Some(v) = features.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite feature {v}")));
    }
    Ok(())
}

/// Fits k-means with k-means++ seeding drawn from `params.seed`.
pub fn kmeans_fit(features: &FeatureMatrix, params: &KMeansParams) -> Result<ClusterModel> {
    check_params(features, params)?;
    let points = Points::from_features(features, params.standardize);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = kmeans_plus_plus(&points, params.k, &mut rng)?;
    lloyd(&points, init, params)
}

/// Runs Lloyd iterations from explicit initial centroids (`params.k` is ignored).
pub fn kmeans_from_init(features: &FeatureMatrix, init: Vec<Vec<f64>>, params: &KMeansParams) -> Result<ClusterModel> {
    let params = KMeansParams {
        k: init.len(),
        ..*params
    };
    check_params(features, &params)?;
    if init.iter().any(|c| c.len() != features.cols()) {
        return Err(Error::Parameter("initial centroid dimension mismatch".into()));
    }
    let points = Points::from_features(features, params.standardize);
    lloyd(&points, init, &params)
}

/// Per-frame SSL and i-vector cluster IDs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameClusterLabels {
    pub k_ssl: usize,
    pub k_ive: usize,
    pub ssl: Vec<u32>,
    pub ive: Vec<u32>,
}

impl FrameClusterLabels {
    pub fn new(k_ssl: usize, k_ive: usize, ssl: Vec<u32>, ive: Vec<u32>) -> Result<Self> {
        if ssl.len() != ive.len() {
            return Err(Error::Validation(format!(
                "{} SSL labels but {} i-vector labels",
                ssl.len(),
                ive.len()
            )));
        }
        if k_ssl == 0 || k_ive == 0 {
            return Err(Error::Validation("cluster counts must be positive".into()));
        }
        if let Some(t) = ssl.iter().position(|&c| c as usize >= k_ssl) {
            return Err(Error::Validation(format!(
                "frame {t}: SSL cluster {} >= {k_ssl}",
                ssl[t]
            )));
        }
        if let Some(t) = ive.iter().position(|&g| g as usize >= k_ive) {
            return Err(Error::Validation(format!(
                "frame {t}: i-vector cluster {} >= {k_ive}",
                ive[t]
            )));
        }
        Ok(FrameClusterLabels { k_ssl, k_ive, ssl, ive })
    }

    pub fn frames(&self) -> usize {
        self.ssl.len()
    }
}

/// Gives frame `t` the pair (SSL cluster of `t`, i-vector cluster of the
/// utterance containing `t`).
pub fn propagate_labels(
    ssl_model: &ClusterModel,
    ive_model: &ClusterModel,
    manifest: &Manifest,
) -> Result<FrameClusterLabels> {
    if ssl_model.assignments.len() != manifest.frame_count() {
        return Err(Error::Validation(format!(
            "SSL clustering has {} frames, manifest has {}",
            ssl_model.assignments.len(),
            manifest.frame_count()
        )));
    }
    if ive_model.assignments.len() != manifest.utterance_count() {
        return Err(Error::Validation(format!(
            "i-vector clustering has {} utterances, manifest has {}",
            ive_model.assignments.len(),
            manifest.utterance_count()
        )));
    }
    let ive = manifest
        .frame_utterances()
        .into_iter()
        .map(|u| ive_model.assignments[u])
        .collect();
    FrameClusterLabels::new(ssl_model.k, ive_model.k, ssl_model.assignments.clone(), ive)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComposition {
    pub cluster: usize,
    pub size: usize,
    pub counts: BTreeMap<String, usize>,
    /// Most frequent label; ties go to the lexicographically smallest.
    pub majority: Option<String>,
    /// Fraction of the cluster carrying the majority label; `None` when empty.
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub label: String,
    pub clusters: Vec<ClusterComposition>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CompositionRow {
    cluster: usize,
    label: String,
    count: usize,
    cluster_size: usize,
    purity: Option<f64>,
}

/// Counts reference labels inside each cluster.
pub fn cluster_composition(
    cluster_ids: &[u32],
    k: usize,
    label_name: &str,
    reference: &[String],
) -> Result<CompositionTable> {
    if cluster_ids.len() != reference.len() {
        return Err(Error::Report(format!(
            "{} cluster assignments but {} '{label_name}' labels",
            cluster_ids.len(),
            reference.len()
        )));
    }
    let mut counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); k];
    for (&c, label) in cluster_ids.iter().zip(reference) {
        let slot = counts
            .get_mut(c as usize)
            .ok_or_else(|| Error::Report(format!("cluster id {c} out of range for k = {k}")))?;
        *slot.entry(label.clone()).or_default() += 1;
    }
    let clusters = counts
        .into_iter()
        .enumerate()
        .map(|(cluster, counts)| {
            let size: usize = counts.values().sum();
            let mut majority: Option<(&String, usize)> = None;
            for (label, &n) in &counts {
                if majority.is_none_or(|(_, best)| n > best) {
                    majority = Some((label, n));
                }
            }
            let purity = majority.map(|(_, n)| n as f64 / size as f64);
            let majority = majority.map(|(l, _)| l.clone());
            ClusterComposition {
                cluster,
                size,
                counts,
                majority,
                purity,
            }
        })
        .collect();
    Ok(CompositionTable {
        label: label_name.to_string(),
        clusters,
    })
}

impl CompositionTable {
    /// CSV with header `cluster,label,count,cluster_size,purity`; an empty
    /// cluster is a single row with an empty label.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for c in &self.clusters {
            if c.counts.is_empty() {
                w.serialize(CompositionRow {
                    cluster: c.cluster,
                    label: String::new(),
                    count: 0,
                    cluster_size: 0,
                    purity: None,
                })
                .map_err(|e| Error::Report(e.to_string()))?;
            }
            for (label, &count) in &c.counts {
                w.serialize(CompositionRow {
                    cluster: c.cluster,
                    label: label.clone(),
                    count,
                    cluster_size: c.size,
                    purity: c.purity,
                })
                .map_err(|e| Error::Report(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_csv(label_name: &str, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let mut by_cluster: BTreeMap<usize, Vec<CompositionRow>> = BTreeMap::new();
        for row in r.deserialize::<CompositionRow>() {
            let row = row.map_err(|e| Error::Report(format!("composition csv: {e}")))?;
            by_cluster.entry(row.cluster).or_default().push(row);
        }
        let k = by_cluster.keys().next_back().map_or(0, |&c| c + 1);
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        for (&cluster, rows) in &by_cluster {
            for row in rows.iter().filter(|r| r.count > 0) {
                ids.extend(std::iter::repeat_n(cluster as u32, row.count));
                labels.extend(std::iter::repeat_n(row.label.clone(), row.count));
            }
        }
        let table = cluster_composition(&ids, k, label_name, &labels)?;
        for c in &table.clusters {
            let declared = by_cluster.get(&c.cluster).and_then(|rows| rows.first());
            if declared.map_or(0, |r| r.cluster_size) != c.size {
                return Err(Error::Report(format!(
                    "composition csv: cluster {} size does not match its counts",
                    c.cluster
                )));
            }
        }
        Ok(table)
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_text(csv_path, &self.to_csv()?)?;
        write_json(json_path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::ManifestRecord;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn features(rows: &[Vec<f32>]) -> FeatureMatrix {
        let f = rows[0].len();
        FeatureMatrix::new(Array2::from_shape_vec((rows.len(), f), rows.concat()).unwrap()).unwrap()
    }

    fn random_features(n: usize, f: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * f).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        FeatureMatrix::new(Array2::from_shape_vec((n, f), data).unwrap()).unwrap()
    }

    #[test]
    fn one_point_per_cluster_is_exact() {
        let x = features(&[vec![0.0, 0.0], vec![5.0, 1.0], vec![-3.0, 2.0]]);
        let m = kmeans_fit(&x, &KMeansParams::new(3, 7)).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut a = m.assignments.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2]);
    }

    #[test]
    fn well_separated_1d() {
        let x = features(&[vec![0.0], vec![1.0], vec![2.0], vec![10.0], vec![11.0], vec![12.0]]);
        for seed in 0..20 {
            let m = kmeans_fit(&x, &KMeansParams::new(2, seed)).unwrap();
            let a = &m.assignments;
            assert!(a[0] == a[1] && a[1] == a[2] && a[3] == a[4] && a[4] == a[5] && a[0] != a[3]);
            let mut c: Vec<f64> = m.centroids.iter().map(|c| c[0]).collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![1.0, 11.0]);
            assert_eq!(m.inertia, 4.0);
        }
    }

    #[test]
    fn parameter_and_data_errors() {
        let x = features(&[vec![0.0], vec![1.0]]);
        assert!(matches!(
            kmeans_fit(&x, &KMeansParams::new(3, 0)),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            kmeans_fit(&x, &KMeansParams::new(0, 0)),
            Err(Error::Parameter(_))
        ));
        let dup = features(&[vec![1.0], vec![1.0], vec![1.0]]);
        assert!(matches!(
            kmeans_fit(&dup, &KMeansParams::new(2, 0)),
            Err(Error::Parameter(_))
        ));
        let nan = Array2::from_shape_vec((2, 1), vec![0.0, f32::NAN]).unwrap();
        assert!(matches!(FeatureMatrix::new(nan), Err(Error::Data(_))));
    }

    #[test]
    fn empty_cluster_is_repaired() {
        // The third initial centroid is far from every point and starts empty.
        let x = features(&[vec![0.0], vec![0.1], vec![5.0], vec![5.2], vec![9.0]]);
        let init = vec![vec![0.0], vec![5.0], vec![100.0]];
        let m = kmeans_from_init(&x, init, &KMeansParams::new(3, 0)).unwrap();
        assert!(m.cluster_sizes().iter().all(|&s| s > 0));
        for w in m.inertia_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    /// Straightforward Lloyd loop used as an independent reference.
    fn reference_lloyd(x: &[Vec<f64>], mut c: Vec<Vec<f64>>, iters: usize, tol: f64) -> (Vec<Vec<u32>>, Vec<f64>) {
        let nearest = |c: &Vec<Vec<f64>>, p: &Vec<f64>| -> (u32, f64) {
            let mut best = (0, f64::INFINITY);
            for (j, cj) in c.iter().enumerate() {
                let d: f64 = p.iter().zip(cj).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 {
                    best = (j as u32, d);
                }
            }
            best
        };
        let mut all_assign = Vec::new();
        let mut inertia = Vec::new();
        let (a, d): (Vec<u32>, Vec<f64>) = x.iter().map(|p| nearest(&c, p)).unzip();
        all_assign.push(a);
        inertia.push(d.iter().sum());
        for _ in 0..iters {
            let a = all_assign.last().unwrap();
            let mut next = vec![vec![0.0; x[0].len()]; c.len()];
            let mut n = vec![0.0; c.len()];
            for (p, &j) in x.iter().zip(a) {
                n[j as usize] += 1.0;
                for (s, v) in next[j as usize].iter_mut().zip(p) {
                    *s += v;
                }
            }
            for (s, &nj) in next.iter_mut().zip(&n) {
                assert!(nj > 0.0, "reference oracle does not handle empty clusters");
                s.iter_mut().for_each(|v| *v /= nj);
            }
            let moved = next
                .iter()
                .zip(&c)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            c = next;
            let (a, d): (Vec<u32>, Vec<f64>) = x.iter().map(|p| nearest(&c, p)).unzip();
            all_assign.push(a);
            inertia.push(d.iter().sum());
            if moved < tol {
                break;
            }
        }
        (all_assign, inertia)
    }

    #[test]
    fn matches_reference_lloyd() {
        for seed in 0..10 {
            let x = random_features(200, 8, seed);
            let rows: Vec<Vec<f64>> = x
                .data()
                .outer_iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            let init = vec![rows[3].clone(), rows[50].clone(), rows[120].clone()];
            let params = KMeansParams::new(3, seed);
            let model = kmeans_from_init(&x, init.clone(), &params).unwrap();
            let (assigns, inertia) = reference_lloyd(&rows, init, params.max_iters, params.tol);
            assert_eq!(model.inertia_history, inertia);
            assert_eq!(&model.assignments, assigns.last().unwrap());
            for w in inertia.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn propagate_labels_examples() {
        let manifest = Manifest::new(vec![
            ManifestRecord {
                utterance_id: "a".into(),
                frame_begin: 0,
                frame_end: 3,
                embedding_ref: None,
                labels: Default::default(),
            },
            ManifestRecord {
                utterance_id: "b".into(),
                frame_begin: 3,
                frame_end: 6,
                embedding_ref: None,
                labels: Default::default(),
            },
        ])
        .unwrap();
        let model = |k, a: Vec<u32>| ClusterModel {
            k,
            seed: 0,
            centroids: vec![vec![0.0]; k],
            assignments: a,
            inertia: 0.0,
            inertia_history: vec![],
            standardized: false,
        };
        let labels = propagate_labels(&model(2, vec![0, 1, 0, 1, 1, 0]), &model(2, vec![1, 0]), &manifest).unwrap();
        assert_eq!(labels.ive, vec![1, 1, 1, 0, 0, 0]);
        assert_eq!(labels.ssl, vec![0, 1, 0, 1, 1, 0]);

        let err = propagate_labels(&model(2, vec![0; 5]), &model(2, vec![1, 0]), &manifest).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));

        let single = Manifest::new(vec![ManifestRecord {
            utterance_id: "only".into(),
            frame_begin: 0,
            frame_end: 4,
            embedding_ref: None,
            labels: Default::default(),
        }])
        .unwrap();
        let labels = propagate_labels(&model(1, vec![0; 4]), &model(2, vec![1]), &single).unwrap();
        assert_eq!(labels.ive, vec![1; 4]);
    }

    #[test]
    fn purity_examples() {
        let mut ids = vec![0u32; 100];
        let mut labels: Vec<String> = (0..100)
            .map(|i| if i < 97 { "male" } else { "female" }.to_string())
            .collect();
        ids.extend([1u32; 10]);
        labels.extend((0..10).map(|i| if i % 2 == 0 { "a" } else { "b" }.to_string()));
        let t = cluster_composition(&ids, 3, "gender", &labels).unwrap();
        assert_eq!(t.clusters[0].purity, Some(0.97));
        assert_eq!(t.clusters[0].majority.as_deref(), Some("male"));
        assert_eq!(t.clusters[1].purity, Some(0.5));
        assert_eq!(t.clusters[1].majority.as_deref(), Some("a"));
        assert_eq!(t.clusters[2].purity, None);
        let back = CompositionTable::from_csv("gender", &t.to_csv().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn cluster_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = kmeans_fit(&random_features(30, 3, 1), &KMeansParams::new(3, 9)).unwrap();
        let p = dir.path().join("c.json");
        m.save(&p).unwrap();
        assert_eq!(ClusterModel::load(&p).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn lloyd_invariants(seed in 0u64..1000, n in 5usize..60, k in 1usize..5) {
            let x = random_features(n, 3, seed);
            let params = KMeansParams::new(k, seed);
            let m = kmeans_fit(&x, &params).unwrap();
            for w in m.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0]);
            }
            prop_assert!(m.cluster_sizes().iter().all(|&s| s > 0));
            let again = kmeans_fit(&x, &params).unwrap();
            prop_assert_eq!(&m, &again);
            // nearest centroid with lowest-index ties, and inertia recomputes
            let mut total = 0.0;
            for (i, row) in x.data().outer_iter().enumerate() {
                let p: Vec<f64> = row.iter().map(|&v| v as f64).collect();
                let d: Vec<f64> = m.centroids.iter().map(|c| squared_distance(&p, c)).collect();
                let best = d.iter().cloned().fold(f64::INFINITY, f64::min);
                let first = d.iter().position(|&v| v == best).unwrap();
                prop_assert_eq!(m.assignments[i] as usize, first);
                total += best;
            }
            prop_assert!((total - m.inertia).abs() <= 1e-6 * total.max(1e-12));
        }
    }
}
