//! Synthetic activation datasets with planted property neurons, and a
//! nearest-centroid probe for measuring what a pruning mask keeps.
//!
//! Every frame belongs to an SSL cluster `c` (random runs of 3 to 10 frames)
//! and every utterance to an i-vector cluster `g`. A planted SSL neuron of
//! cluster `c` fires with probability `p_boost` on frames of `c`; a planted
//! i-vector neuron of `g` fires with `p_boost` on every frame of an utterance
//! of `g`. Otherwise dims fire with `p_base`. Fired values are drawn around
//! 10, a handful of per-layer background dims around 5 and everything else
//! around 0 (unit-variance noise in each tier). The background dims absorb
//! the top-k slots that fired dims leave free, which keeps the active rate of
//! unplanted dims close to `p_base`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::FrameClusterLabels;
use crate::error::{Error, Result};
use crate::io_util::{write_json, write_text};
use crate::neuron_id::{Family, LayerIndices, NeuronSet, Provenance};
use crate::npy;
use crate::pruning::{FfnLayer, FfnWeights, PruneMask};
use crate::tensor_io::{
    layer_file_name, save_neuron_sets, ActivationStore, FeatureMatrix, LabelValue, LayerActivations, Manifest,
    ManifestRecord,
};

/// Per-utterance label column tied to the i-vector cluster.
pub const SPEAKER_LABEL: &str = "speaker_class";
/// Per-frame label column tied to the SSL cluster.
pub const PHONE_LABEL: &str = "phone_class";

const FIRED_MEAN: f32 = 10.0;
const BACKGROUND_MEAN: f32 = 5.0;
const CENTRE_SCALE: f32 = 6.0;

// RNG stream families; the low 48 bits carry the index within a family.
const STREAM_LAYOUT: u64 = 0;
const STREAM_ACTIVATIONS: u64 = 1 << 48;
const STREAM_WEIGHTS: u64 = 2 << 48;
const STREAM_FEATURES: u64 = 3 << 48;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample(StandardNormal)
}

/// Explicit planted dims, shared by every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedDims {
    /// `ssl[c]`: dims boosted on frames of SSL cluster `c`.
    pub ssl: Vec<Vec<u32>>,
    /// `ive[g]`: dims boosted on frames of utterances in i-vector cluster `g`.
    pub ive: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub layers: usize,
    pub frames: usize,
    pub utterances: usize,
    pub width: usize,
    pub k_ssl: usize,
    pub k_ive: usize,
    /// Planted dims per cluster and family, drawn per layer when `planted` is absent.
    #[serde(default = "default_planted_per_cluster")]
    pub planted_per_cluster: usize,
    #[serde(default)]
    pub planted: Option<PlantedDims>,
    /// Dims per `(g, c)` pair boosted only under that pair. They belong to
    /// the joint groups but to no intersect-mode group.
    #[serde(default)]
    pub joint_planted_per_pair: usize,
    pub p_base: f64,
    pub p_boost: f64,
    #[serde(default = "default_background_dims")]
    pub background_dims: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_feature_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    /// Weight magnitude of planted dims relative to the rest.
    #[serde(default = "default_planted_weight_scale")]
    pub planted_weight_scale: f64,
}

fn default_planted_per_cluster() -> usize {
    8
}
fn default_background_dims() -> usize {
    8
}
fn default_feature_dim() -> usize {
    16
}
fn default_model_dim() -> usize {
    32
}
fn default_planted_weight_scale() -> f64 {
    0.5
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            layers: 4,
            frames: 20_000,
            utterances: 200,
            width: 256,
            k_ssl: 3,
            k_ive: 2,
            planted_per_cluster: default_planted_per_cluster(),
            planted: None,
            joint_planted_per_pair: 0,
            p_base: 0.005,
            p_boost: 0.2,
            background_dims: default_background_dims(),
            seed: 0,
            feature_dim: default_feature_dim(),
            embedding_dim: default_feature_dim(),
            model_dim: default_model_dim(),
            planted_weight_scale: default_planted_weight_scale(),
        }
    }
}

/// Role of a hidden dim in one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Plain,
    Background,
    Ssl(u32),
    Ive(u32),
    Joint(u32, u32),
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec = toml::from_str(text).map_err(|e| Error::Config(format!("synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SynthSpec::from_toml(&text)
    }

    fn planted_total(&self) -> usize {
        match &self.planted {
            Some(p) => p.ssl.iter().chain(&p.ive).map(Vec::len).sum(),
            None => self.planted_per_cluster * (self.k_ssl + self.k_ive),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("synth spec: {m}")));
        if self.layers == 0 || self.width == 0 || self.k_ssl == 0 || self.k_ive == 0 {
            return bad("layers, width, k_ssl and k_ive must be positive".into());
        }
        if self.utterances < 2 * self.k_ive {
            return bad(format!(
                "{} utterances cannot give each of {} i-vector clusters two utterances",
                self.utterances, self.k_ive
            ));
        }
        if self.frames < self.utterances || self.frames < self.k_ssl {
            return bad(format!(
                "{} frames is fewer than the {} utterances or {} SSL clusters",
                self.frames, self.utterances, self.k_ssl
            ));
        }
        if !(0.0..=1.0).contains(&self.p_base) || !(0.0..=1.0).contains(&self.p_boost) || self.p_base > self.p_boost {
            return bad(format!(
                "need 0 <= p_base <= p_boost <= 1, got p_base = {}, p_boost = {}",
                self.p_base, self.p_boost
            ));
        }
        if !(self.planted_weight_scale > 0.0 && self.planted_weight_scale.is_finite()) {
            return bad(format!(
                "planted_weight_scale must be positive, got {}",
                self.planted_weight_scale
            ));
        }
        if self.feature_dim == 0 || self.embedding_dim == 0 || self.model_dim == 0 {
            return bad("feature_dim, embedding_dim and model_dim must be positive".into());
        }
        if let Some(p) = &self.planted {
            if p.ssl.len() != self.k_ssl || p.ive.len() != self.k_ive {
                return bad(format!(
                    "planted lists cover {} SSL and {} i-vector clusters, expected {} and {}",
                    p.ssl.len(),
                    p.ive.len(),
                    self.k_ssl,
                    self.k_ive
                ));
            }
            let mut seen = BTreeSet::new();
            for &d in p.ssl.iter().chain(&p.ive).flatten() {
                if d as usize >= self.width {
                    return bad(format!("planted dim {d} out of range [0, {})", self.width));
                }
                if !seen.insert(d) {
                    return bad(format!("planted dim {d} is listed for more than one cluster"));
                }
            }
        }
        let needed =
            self.planted_total() + self.joint_planted_per_pair * self.k_ssl * self.k_ive + self.background_dims;
        if needed > self.width {
            return bad(format!(
                "{needed} planted and background dims exceed width {}",
                self.width
            ));
        }
        Ok(())
    }

    fn layer_roles(&self, rng: &mut ChaCha8Rng) -> Vec<Role> {
        let mut roles = vec![Role::Plain; self.width];
        let mut free: Vec<u32> = (0..self.width as u32).collect();
        if let Some(p) = &self.planted {
            for (c, dims) in p.ssl.iter().enumerate() {
                for &d in dims {
                    roles[d as usize] = Role::Ssl(c as u32);
                }
            }
            for (g, dims) in p.ive.iter().enumerate() {
                for &d in dims {
                    roles[d as usize] = Role::Ive(g as u32);
                }
            }
            free.retain(|&d| roles[d as usize] == Role::Plain);
        }
        free.shuffle(rng);
        let mut take = |n: usize| free.split_off(free.len() - n);
        if self.planted.is_none() {
            for c in 0..self.k_ssl {
                for d in take(self.planted_per_cluster) {
                    roles[d as usize] = Role::Ssl(c as u32);
                }
            }
            for g in 0..self.k_ive {
                for d in take(self.planted_per_cluster) {
                    roles[d as usize] = Role::Ive(g as u32);
                }
            }
        }
        for g in 0..self.k_ive {
            for c in 0..self.k_ssl {
                for d in take(self.joint_planted_per_pair) {
                    roles[d as usize] = Role::Joint(g as u32, c as u32);
                }
            }
        }
        for d in take(self.background_dims) {
            roles[d as usize] = Role::Background;
        }
        roles
    }
}

/// A generated dataset together with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    /// Manifest carries `speaker_class` per utterance and `phone_class` per frame.
    pub store: ActivationStore,
    /// True cluster of every frame.
    pub labels: FrameClusterLabels,
    /// True i-vector cluster of every utterance.
    pub utterance_clusters: Vec<u32>,
    /// `T x feature_dim` frame features clustered into SSL clusters.
    pub ssl_features: FeatureMatrix,
    /// `utterances x embedding_dim` utterance embeddings.
    pub ivectors: FeatureMatrix,
    pub weights: FfnWeights,
    /// Planted `G_ssl(c)`, `G_ive(g)`, joint `G_ive(g,c)`, `P_ssl` and `P_ive` sets.
    pub ground_truth: Vec<NeuronSet>,
}

fn clustered_features(rng: &mut ChaCha8Rng, k: usize, dim: usize, membership: &[u32]) -> Result<FeatureMatrix> {
    let centres: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..dim).map(|_| CENTRE_SCALE * normal(rng)).collect())
        .collect();
    let data = Array2::from_shape_fn((membership.len(), dim), |(i, j)| {
        centres[membership[i] as usize][j] + normal(rng)
    });
    FeatureMatrix::new(data)
}

/// Generates a dataset; the output depends only on `spec`.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let (t_total, n_utt) = (spec.frames, spec.utterances);
    let mut rng = rng_for(spec.seed, STREAM_LAYOUT);

    let mut utterance_clusters: Vec<u32> = (0..n_utt).map(|u| (u % spec.k_ive) as u32).collect();
    utterance_clusters.shuffle(&mut rng);

    // The first k_ssl runs visit every SSL cluster once.
    let mut frame_ssl = Vec::with_capacity(t_total);
    let mut run = 0;
    while frame_ssl.len() < t_total {
        let len = rng.gen_range(3..=10usize).min(t_total - frame_ssl.len());
        let c = if run < spec.k_ssl {
            run as u32
        } else {
            rng.gen_range(0..spec.k_ssl) as u32
        };
        frame_ssl.extend(std::iter::repeat_n(c, len));
        run += 1;
    }

    let bounds: Vec<(usize, usize)> = (0..n_utt)
        .map(|u| (u * t_total / n_utt, (u + 1) * t_total / n_utt))
        .collect();
    let frame_ive: Vec<u32> = bounds
        .iter()
        .zip(&utterance_clusters)
        .flat_map(|(&(b, e), &g)| std::iter::repeat_n(g, e - b))
        .collect();

    let roles: Vec<Vec<Role>> = (0..spec.layers).map(|_| spec.layer_roles(&mut rng)).collect();

    let records = bounds
        .iter()
        .enumerate()
        .map(|(u, &(b, e))| {
            let mut labels = BTreeMap::new();
            labels.insert(
                SPEAKER_LABEL.to_string(),
                LabelValue::Utterance(format!("s{}", utterance_clusters[u])),
            );
            labels.insert(
                PHONE_LABEL.to_string(),
                LabelValue::Frames(frame_ssl[b..e].iter().map(|c| format!("p{c}")).collect()),
            );
            ManifestRecord {
                utterance_id: format!("utt_{u:05}"),
                frame_begin: b,
                frame_end: e,
                embedding_ref: None,
                labels,
            }
        })
        .collect();
    let manifest = Manifest::new(records)?;

    let layers = (0..spec.layers)
        .map(|layer| {
            let roles = &roles[layer];
            let chunks: Vec<Vec<f32>> = bounds
                .par_iter()
                .enumerate()
                .map(|(u, &(b, e))| {
                    let mut rng = rng_for(spec.seed, STREAM_ACTIVATIONS | (layer * n_utt + u) as u64);
                    let g = utterance_clusters[u];
                    let mut out = Vec::with_capacity((e - b) * spec.width);
                    for &c in &frame_ssl[b..e] {
                        for role in roles {
                            let boosted = match *role {
                                Role::Ssl(rc) => rc == c,
                                Role::Ive(rg) => rg == g,
                                Role::Joint(rg, rc) => rg == g && rc == c,
                                Role::Plain | Role::Background => false,
                            };
                            let p = if boosted { spec.p_boost } else { spec.p_base };
                            let fired = rng.gen::<f64>() < p;
                            let mean = if fired {
                                FIRED_MEAN
                            } else if *role == Role::Background {
                                BACKGROUND_MEAN
                            } else {
                                0.0
                            };
                            out.push(mean + normal(&mut rng));
                        }
                    }
                    out
                })
                .collect();
            let data = Array2::from_shape_vec((t_total, spec.width), chunks.concat())
                .map_err(|e| Error::Validation(e.to_string()))?;
            Ok(LayerActivations {
                layer_index: layer,
                data,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let store = ActivationStore::new(layers, manifest)?;

    let mut feature_rng = rng_for(spec.seed, STREAM_FEATURES);
    let ssl_features = clustered_features(&mut feature_rng, spec.k_ssl, spec.feature_dim, &frame_ssl)?;
    let ivectors = clustered_features(&mut feature_rng, spec.k_ive, spec.embedding_dim, &utterance_clusters)?;

    let weights = synth_weights(spec, &roles)?;
    let ground_truth = ground_truth_sets(spec, &roles);
    let labels = FrameClusterLabels::new(spec.k_ssl, spec.k_ive, frame_ssl, frame_ive)?;

    Ok(SynthData {
        spec: spec.clone(),
        store,
        labels,
        utterance_clusters,
        ssl_features,
        ivectors,
        weights,
        ground_truth,
    })
}

/// Random FFN weights; planted dims are scaled down so magnitude pruning
/// removes them first.
fn synth_weights(spec: &SynthSpec, roles: &[Vec<Role>]) -> Result<FfnWeights> {
    let m = spec.model_dim;
    let layers = roles
        .iter()
        .enumerate()
        .map(|(layer, roles)| {
            let mut rng = rng_for(spec.seed, STREAM_WEIGHTS | layer as u64);
            let scale: Vec<f32> = roles
                .iter()
                .map(|r| match r {
                    Role::Plain | Role::Background => 1.0,
                    _ => spec.planted_weight_scale as f32,
                })
                .collect();
            let std = 1.0 / (m as f32).sqrt();
            let w1 = Array2::from_shape_fn((spec.width, m), |(d, _)| scale[d] * std * normal(&mut rng));
            let b1 = Array1::from_shape_fn(spec.width, |d| scale[d] * 0.1 * normal(&mut rng));
            let w2 = Array2::from_shape_fn((m, spec.width), |(_, d)| scale[d] * std * normal(&mut rng));
            FfnLayer { layer, w1, b1, w2 }
        })
        .collect();
    FfnWeights::new(layers)
}

fn ground_truth_sets(spec: &SynthSpec, roles: &[Vec<Role>]) -> Vec<NeuronSet> {
    let provenance = Provenance {
        seed: Some(spec.seed),
        k_ssl: Some(spec.k_ssl),
        k_ive: Some(spec.k_ive),
        source: Some("ground_truth".into()),
        ..Provenance::default()
    };
    let set = |family: Family, keep: &dyn Fn(Role) -> bool| NeuronSet {
        family,
        width: spec.width,
        layers: roles
            .iter()
            .enumerate()
            .map(|(layer, roles)| LayerIndices {
                layer,
                indices: (0..spec.width as u32).filter(|&d| keep(roles[d as usize])).collect(),
            })
            .collect(),
        provenance: provenance.clone(),
    };
    let mut out = Vec::new();
    for c in 0..spec.k_ssl as u32 {
        out.push(set(Family::GSsl(c as usize), &|r| r == Role::Ssl(c)));
    }
    for g in 0..spec.k_ive as u32 {
        out.push(set(Family::GIve(g as usize), &|r| r == Role::Ive(g)));
    }
    if spec.joint_planted_per_pair > 0 {
        for g in 0..spec.k_ive as u32 {
            for c in 0..spec.k_ssl as u32 {
                out.push(set(Family::GIveJoint(g as usize, c as usize), &|r| {
                    r == Role::Joint(g, c)
                }));
            }
        }
    }
    out.push(set(Family::PSsl, &|r| matches!(r, Role::Ssl(_))));
    out.push(set(Family::PIve, &|r| matches!(r, Role::Ive(_))));
    out
}

impl SynthData {
    pub fn truth(&self, family: Family) -> Option<&NeuronSet> {
        self.ground_truth.iter().find(|s| s.family == family)
    }

    pub fn utterance_classes(&self) -> Vec<String> {
        self.utterance_clusters.iter().map(|g| format!("s{g}")).collect()
    }

    /// Writes the dataset under `dir`:
    ///
    /// ```text
    /// activations/layer_<n>.npy   manifest.jsonl   ivectors/<utt>.npy
    /// ssl_features.npy   ffn/layer_<n>_{w1,b1,w2}.npy
    /// ground_truth.json   true_labels.json   synth_spec.json
    /// ```
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut manifest = self.store.manifest().clone();
        for (r, row) in manifest.records.iter_mut().zip(self.ivectors.data().outer_iter()) {
            let rel = PathBuf::from("ivectors").join(format!("{}.npy", r.utterance_id));
            npy::write_f32_matrix(&dir.join(&rel), &row.to_owned().insert_axis(ndarray::Axis(0)))?;
            r.embedding_ref = Some(rel);
        }
        let act_dir = dir.join("activations");
        for l in self.store.layers() {
            npy::write_f32_matrix(&act_dir.join(layer_file_name(l.layer_index)), &l.data)?;
        }
        manifest.save(&dir.join("manifest.jsonl"))?;
        self.ssl_features.save(&dir.join("ssl_features.npy"))?;
        self.weights.save(&dir.join("ffn"))?;
        save_neuron_sets(&self.ground_truth, &dir.join("ground_truth.json"))?;
        write_json(&dir.join("true_labels.json"), &self.labels)?;
        write_json(&dir.join("synth_spec.json"), &self.spec)?;
        Ok(())
    }
}

/// Recovery of a planted set by an identified one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SetScore {
    pub true_positives: usize,
    pub identified: usize,
    pub planted: usize,
}

impl SetScore {
    /// Layers are matched by index; a layer missing from one side counts as empty.
    pub fn compare(identified: &NeuronSet, planted: &NeuronSet) -> Self {
        let mut score = SetScore::default();
        let layers: BTreeSet<usize> = identified.layer_ids().into_iter().chain(planted.layer_ids()).collect();
        for layer in layers {
            let a: BTreeSet<u32> = identified.layer(layer).unwrap_or(&[]).iter().copied().collect();
            let b: BTreeSet<u32> = planted.layer(layer).unwrap_or(&[]).iter().copied().collect();
            score.true_positives += a.intersection(&b).count();
            score.identified += a.len();
            score.planted += b.len();
        }
        score
    }

    pub fn merge(self, other: SetScore) -> SetScore {
        SetScore {
            true_positives: self.true_positives + other.true_positives,
            identified: self.identified + other.identified,
            planted: self.planted + other.planted,
        }
    }

    /// 1 when nothing was planted.
    pub fn recall(&self) -> f64 {
        if self.planted == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.planted as f64
        }
    }

    /// 1 when nothing was identified.
    pub fn precision(&self) -> f64 {
        if self.identified == 0 {
            1.0
        } else {
            self.true_positives as f64 / self.identified as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Sorted class names; rows and columns of `confusion` follow this order.
    pub classes: Vec<String>,
    /// `confusion[true][predicted]` over held-out utterances.
    pub confusion: Vec<Vec<usize>>,
}

/// Mean-pools each utterance over the kept dims of every layer and classifies
/// a seed-fixed 20% of each class by nearest class centroid of the rest.
///
/// Dims outside `mask` are zeroed before pooling, which leaves Euclidean
/// distances equal to those over the kept dims alone.
pub fn centroid_probe(
    store: &ActivationStore,
    mask: Option<&PruneMask>,
    classes: &[String],
    seed: u64,
) -> Result<ProbeResult> {
    let manifest = store.manifest();
    if classes.len() != manifest.utterance_count() {
        return Err(Error::Validation(format!(
            "{} class labels for {} utterances",
            classes.len(),
            manifest.utterance_count()
        )));
    }
    let names: Vec<String> = classes.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if names.len() < 2 {
        return Err(Error::Validation(format!(
            "probe needs at least 2 classes, got {}",
            names.len()
        )));
    }
    let class_of: Vec<usize> = classes
        .iter()
        .map(|c| names.binary_search(c).expect("name collected above"))
        .collect();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); names.len()];
    for (u, &c) in class_of.iter().enumerate() {
        members[c].push(u);
    }
    if let Some(c) = members.iter().position(|m| m.len() < 2) {
        return Err(Error::Validation(format!(
            "class '{}' has {} utterance(s); the probe needs at least 2",
            names[c],
            members[c].len()
        )));
    }

    let kept: Vec<Vec<usize>> = store
        .layers()
        .iter()
        .map(|l| match mask {
            None => Ok((0..l.width()).collect()),
            Some(m) => m
                .kept(l.layer_index)
                .map(|k| k.iter().map(|&d| d as usize).collect())
                .ok_or_else(|| {
                    Error::Validation(format!(
                        "mask '{}' has no entry for layer {}",
                        m.method_tag, l.layer_index
                    ))
                }),
        })
        .collect::<Result<_>>()?;
    let pooled: Vec<Vec<f64>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let n = r.len() as f64;
            let mut v = Vec::new();
            for (l, dims) in store.layers().iter().zip(&kept) {
                for &d in dims {
                    let col = l.data.column(d);
                    let sum: f64 = (r.frame_begin..r.frame_end).map(|t| col[t] as f64).sum();
                    v.push(sum / n);
                }
            }
            v
        })
        .collect();

    let mut rng = rng_for(seed, STREAM_LAYOUT);
    let mut test = vec![false; classes.len()];
    for m in &mut members {
        m.shuffle(&mut rng);
        let n_test = ((0.2 * m.len() as f64).round() as usize).clamp(1, m.len() - 1);
        for &u in &m[..n_test] {
            test[u] = true;
        }
    }

    let dim = pooled[0].len();
    let mut centroids = vec![vec![0.0; dim]; names.len()];
    let mut counts = vec![0usize; names.len()];
    for (u, v) in pooled.iter().enumerate().filter(|(u, _)| !test[*u]) {
        counts[class_of[u]] += 1;
        for (c, x) in centroids[class_of[u]].iter_mut().zip(v) {
            *c += x;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        for x in c.iter_mut() {
            *x /= n as f64;
        }
    }

    let mut confusion = vec![vec![0usize; names.len()]; names.len()];
    for (u, v) in pooled.iter().enumerate().filter(|(u, _)| test[*u]) {
        let mut best = (0, f64::INFINITY);
        for (ci, c) in centroids.iter().enumerate() {
            let d: f64 = c.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (ci, d);
            }
        }
        confusion[class_of[u]][best.0] += 1;
    }
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..names.len()).map(|i| confusion[i][i]).sum();
    Ok(ProbeResult {
        accuracy: correct as f64 / total as f64,
        classes: names,
        confusion,
    })
}

/// Writes a probe result as JSON.
pub fn save_probe(result: &ProbeResult, path: &Path) -> Result<()> {
    write_json(path, result)
}

/// Writes `text` as the TOML form of `spec`.
pub fn save_spec_toml(spec: &SynthSpec, path: &Path) -> Result<()> {
    let text = toml::to_string(spec).map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron_id::{IdentifyOptions, IveMode};
    use crate::pipeline::{binarize_store, identify};

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            layers: 2,
            frames: 4000,
            utterances: 40,
            width: 64,
            planted_per_cluster: 4,
            background_dims: 4,
            seed,
            ..SynthSpec::default()
        }
    }

    fn run(data: &SynthData, lambda: f64, rho: f64, mode: IveMode) -> crate::pipeline::Identification {
        let patterns = binarize_store(&data.store, lambda).unwrap();
        identify(
            &patterns,
            &data.labels,
            mode,
            &IdentifyOptions::new(rho),
            &Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(3)).unwrap();
        let b = generate(&small(3)).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.ground_truth, b.ground_truth);
        assert_eq!(a.weights, b.weights);
        let c = generate(&small(4)).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let mut s = small(0);
        s.p_base = 0.3;
        assert!(matches!(generate(&s), Err(Error::Validation(_))));
        let mut s = small(0);
        s.planted = Some(PlantedDims {
            ssl: vec![vec![1, 2], vec![2, 3], vec![4]],
            ive: vec![vec![5], vec![6]],
        });
        assert!(s.validate().is_err());
        let mut s = small(0);
        s.planted_per_cluster = 20;
        assert!(s.validate().is_err());
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let spec = SynthSpec::from_toml(
            "layers = 2\nframes = 100\nutterances = 10\nwidth = 64\nk_ssl = 2\nk_ive = 2\np_base = 0.0\np_boost = 1.0\n",
        )
        .unwrap();
        assert_eq!(spec.planted_per_cluster, 8);
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(SynthSpec::from_toml(&text).unwrap(), spec);
        assert!(SynthSpec::from_toml("layers = 2\nbogus = 1\n").is_err());
    }

    #[test]
    fn noiseless_limit_recovers_exactly() {
        let spec = SynthSpec {
            p_base: 0.0,
            p_boost: 1.0,
            planted: Some(PlantedDims {
                ssl: vec![vec![0, 1], vec![2, 3], vec![4, 5]],
                ive: vec![vec![10, 11], vec![12, 13]],
            }),
            ..small(1)
        };
        let data = generate(&spec).unwrap();
        // 4 fired dims per frame plus room for the 4 background dims.
        let id = run(&data, 12.5, 1.0, IveMode::Intersect);
        assert_eq!(id.p_ssl.layers, data.truth(Family::PSsl).unwrap().layers);
        assert_eq!(id.p_ive.layers, data.truth(Family::PIve).unwrap().layers);
    }

    #[test]
    fn joint_plants_separate_intersect_from_union() {
        let spec = SynthSpec {
            joint_planted_per_pair: 2,
            ..small(2)
        };
        let data = generate(&spec).unwrap();
        let inter = run(&data, 5.0, 1.0, IveMode::Intersect);
        let union = run(&data, 5.0, 1.0, IveMode::Union);
        for g in 0..2 {
            for c in 0..3 {
                let joint = data.truth(Family::GIveJoint(g, c)).unwrap();
                for l in &joint.layers {
                    let a = &union.ive.layers[l.layer].groups[g];
                    let i = &inter.ive.layers[l.layer].groups[g];
                    for d in &l.indices {
                        assert!(a.contains(d), "union misses joint dim {d}");
                        assert!(!i.contains(d), "intersect keeps joint dim {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn null_case_is_at_chance() {
        let spec = SynthSpec {
            p_base: 0.005,
            p_boost: 0.005,
            ..small(5)
        };
        let data = generate(&spec).unwrap();
        let id = run(&data, 5.0, 1.0, IveMode::Intersect);
        let planted = data.truth(Family::PSsl).unwrap().clone();
        let observed = SetScore::compare(&id.protected, &planted).true_positives;
        // Permutation baseline: overlap of equally sized random sets.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut baseline = Vec::new();
        for _ in 0..200 {
            let mut hits = 0;
            for l in &id.protected.layers {
                let mut dims: Vec<u32> = (0..spec.width as u32).collect();
                dims.shuffle(&mut rng);
                let truth = planted.layer(l.layer).unwrap();
                hits += dims[..l.indices.len()].iter().filter(|d| truth.contains(d)).count();
            }
            baseline.push(hits);
        }
        baseline.sort_unstable();
        assert!(
            observed <= baseline[197],
            "overlap {observed} above the 99th percentile {}",
            baseline[197]
        );
    }

    fn constant_store(signatures: &[(usize, [f32; 4])]) -> (ActivationStore, Vec<String>) {
        let mut rows = Vec::new();
        let mut records = Vec::new();
        let mut classes = Vec::new();
        for (u, (class, sig)) in signatures.iter().enumerate() {
            for _ in 0..3 {
                rows.extend_from_slice(sig);
            }
            records.push(ManifestRecord {
                utterance_id: format!("u{u}"),
                frame_begin: 3 * u,
                frame_end: 3 * u + 3,
                embedding_ref: None,
                labels: BTreeMap::new(),
            });
            classes.push(format!("k{class}"));
        }
        let data = Array2::from_shape_vec((rows.len() / 4, 4), rows).unwrap();
        let store = ActivationStore::new(
            vec![LayerActivations { layer_index: 0, data }],
            Manifest::new(records).unwrap(),
        )
        .unwrap();
        (store, classes)
    }

    #[test]
    fn separable_classes_probe_perfectly() {
        let sigs: Vec<(usize, [f32; 4])> = (0..10)
            .map(|u| {
                if u % 2 == 0 {
                    (0, [1.0, 0.0, 0.0, 0.0])
                } else {
                    (1, [0.0, 0.0, 1.0, 0.0])
                }
            })
            .collect();
        let (store, classes) = constant_store(&sigs);
        let r = centroid_probe(&store, None, &classes, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let total: usize = r.confusion.iter().flatten().sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn probe_rejects_tiny_classes() {
        let (store, mut classes) = constant_store(&[(0, [1.0; 4]), (0, [1.0; 4]), (1, [0.0; 4])]);
        assert!(matches!(
            centroid_probe(&store, None, &classes, 0),
            Err(Error::Validation(_))
        ));
        classes = vec!["a".into(); 3];
        assert!(matches!(
            centroid_probe(&store, None, &classes, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn masked_probe_equals_compacted_probe() {
        let data = generate(&small(6)).unwrap();
        let classes = data.utterance_classes();
        let mask = PruneMask {
            method_tag: "test".into(),
            target_avg_dims: 10.0,
            width: 64,
            layers: (0..2)
                .map(|layer| LayerIndices {
                    layer,
                    indices: (0..64).filter(|d| (d * 7 + layer as u32) % 5 == 0).collect(),
                })
                .collect(),
            provenance: Provenance::default(),
        };
        let kept: BTreeMap<usize, Vec<u32>> = mask.layers.iter().map(|l| (l.layer, l.indices.clone())).collect();
        let compact = data.store.select_dims(&kept).unwrap();
        assert_eq!(
            centroid_probe(&data.store, Some(&mask), &classes, 11).unwrap(),
            centroid_probe(&compact, None, &classes, 11).unwrap()
        );
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        let data = generate(&small(7)).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for seed in 0..20u64 {
            let mut classes = data.utterance_classes();
            classes.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + seed));
            let r = centroid_probe(&data.store, None, &classes, seed).unwrap();
            correct += (0..2).map(|i| r.confusion[i][i]).sum::<usize>();
            total += r.confusion.iter().flatten().sum::<usize>();
        }
        // 160 Bernoulli(0.5) trials: 3 standard deviations is about 19.
        let p = correct as f64 / total as f64;
        assert!(
            (p - 0.5).abs() < 3.0 * (0.25 / total as f64).sqrt(),
            "accuracy {p} over {total} trials"
        );
    }

    #[test]
    fn score_counts() {
        let set = |idx: Vec<u32>| NeuronSet {
            family: Family::PSsl,
            width: 10,
            layers: vec![LayerIndices { layer: 0, indices: idx }],
            provenance: Provenance::default(),
        };
        let s = SetScore::compare(&set(vec![1, 2, 3, 4]), &set(vec![2, 3, 5]));
        assert_eq!(
            s,
            SetScore {
                true_positives: 2,
                identified: 4,
                planted: 3
            }
        );
        assert_eq!(s.precision(), 0.5);
        assert!((s.recall() - 2.0 / 3.0).abs() < 1e-12);
    }
}
