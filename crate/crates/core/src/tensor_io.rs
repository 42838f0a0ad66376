//! Activation stores, manifests, feature matrices and neuron-set files.
//!
//! On-disk layout:
//!
//! * activations: a directory holding one `layer_<n>.npy` file per layer, each a
//!   C-contiguous little-endian `f32` array of shape `(T, D)`;
//! * manifest: UTF-8 JSON lines, one record per utterance;
//! * neuron sets: JSON `{version: 1, family, width, layers: [{layer, indices}]}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json, write_text};
use crate::neuron_id::NeuronSet;
use crate::npy;

pub const FORMAT_VERSION: u32 = 1;

/// One layer's FFN hidden activations, a `T x D` matrix with one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub layer_index: usize,
    pub data: Array2<f32>,
}

impl LayerActivations {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    fn check_finite(&self) -> Result<()> {
        for ((t, d), v) in self.data.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite value {v} at layer {}, frame {t}, dim {d}",
                    self.layer_index
                )));
            }
        }
        Ok(())
    }
}

/// Label column value: either one label for the whole utterance or one per frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Utterance(String),
    Frames(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub frame_begin: usize,
    pub frame_end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, LabelValue>,
}

impl ManifestRecord {
    pub fn len(&self) -> usize {
        self.frame_end - self.frame_begin
    }

    pub fn is_empty(&self) -> bool {
        self.frame_end <= self.frame_begin
    }
}

/// Binds frame ranges to utterances. Records are sorted, non-overlapping and
/// jointly cover `[0, T)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    /// Directory relative `embedding_ref` paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let manifest = Manifest {
            records,
            base_dir: PathBuf::from("."),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord =
                serde_json::from_str(line).map_err(|e| Error::Manifest(format!("line {}: {e}", line_no + 1)))?;
            records.push(record);
        }
        Manifest::new(records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest = Manifest::parse_jsonl(&text)?;
        manifest.base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(manifest)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("manifest records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_jsonl())
    }

    /// Checks ordering, coverage and per-frame label lengths.
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Manifest("manifest has no records".into()));
        }
        let mut expected = 0usize;
        for (i, r) in self.records.iter().enumerate() {
            if r.frame_end <= r.frame_begin {
                return Err(Error::Manifest(format!(
                    "record {i} ('{}') has empty or inverted range [{}, {})",
                    r.utterance_id, r.frame_begin, r.frame_end
                )));
            }
            if r.frame_begin > expected {
                return Err(Error::Manifest(format!("gap at frame {expected}")));
            }
            if r.frame_begin < expected {
                return Err(Error::Manifest(format!(
                    "overlap at frame {} (record {i}, '{}')",
                    r.frame_begin, r.utterance_id
                )));
            }
            for (name, value) in &r.labels {
                if let LabelValue::Frames(v) = value {
                    if v.len() != r.len() {
                        return Err(Error::Manifest(format!(
                            "record {i} ('{}'): label '{name}' has {} entries for {} frames",
                            r.utterance_id,
                            v.len(),
                            r.len()
                        )));
                    }
                }
            }
            expected = r.frame_end;
        }
        Ok(())
    }

    /// Total frame count `T` covered by the manifest.
    pub fn frame_count(&self) -> usize {
        self.records.last().map_or(0, |r| r.frame_end)
    }

    pub fn utterance_count(&self) -> usize {
        self.records.len()
    }

    /// Utterance index of every frame.
    pub fn frame_utterances(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.frame_count());
        for (u, r) in self.records.iter().enumerate() {
            out.extend(std::iter::repeat_n(u, r.len()));
        }
        out
    }

    /// Per-frame values of a label column; utterance-level labels are broadcast.
    pub fn frame_labels(&self, name: &str) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(self.frame_count());
        for r in &self.records {
            match r.labels.get(name) {
                Some(LabelValue::Utterance(l)) => out.extend(std::iter::repeat_n(l.clone(), r.len())),
                Some(LabelValue::Frames(v)) => out.extend(v.iter().cloned()),
                None => {
                    return Err(Error::Report(format!(
                        "label column '{name}' missing for utterance '{}'",
                        r.utterance_id
                    )))
                }
            }
        }
        Ok(out)
    }

    /// Per-utterance values of a label column. Per-frame columns are rejected.
    pub fn utterance_labels(&self, name: &str) -> Result<Vec<String>> {
        self.records
            .iter()
            .map(|r| match r.labels.get(name) {
                Some(LabelValue::Utterance(l)) => Ok(l.clone()),
                Some(LabelValue::Frames(_)) => Err(Error::Report(format!(
                    "label column '{name}' is per-frame for utterance '{}'",
                    r.utterance_id
                ))),
                None => Err(Error::Report(format!(
                    "label column '{name}' missing for utterance '{}'",
                    r.utterance_id
                ))),
            })
            .collect()
    }

    /// Loads every record's `embedding_ref` into an `N x F` matrix.
    pub fn load_embeddings(&self) -> Result<FeatureMatrix> {
        let mut rows: Vec<Vec<f32>> = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let rel = r
                .embedding_ref
                .as_ref()
                .ok_or_else(|| Error::Manifest(format!("utterance '{}' has no embedding_ref", r.utterance_id)))?;
            let path = self.base_dir.join(rel);
            let m = npy::read_f32_matrix(&path)?;
            if m.nrows() != 1 {
                return Err(Error::Manifest(format!(
                    "embedding for '{}' must be a single vector, found shape {:?}",
                    r.utterance_id,
                    m.dim()
                )));
            }
            if let Some(first) = rows.first() {
                if first.len() != m.ncols() {
                    return Err(Error::Manifest(format!(
                        "embedding for '{}' has dimension {}, expected {}",
                        r.utterance_id,
                        m.ncols(),
                        first.len()
                    )));
                }
            }
            rows.push(m.iter().copied().collect());
        }
        let f = rows[0].len();
        let data =
            Array2::from_shape_vec((rows.len(), f), rows.concat()).map_err(|e| Error::Manifest(e.to_string()))?;
        FeatureMatrix::new(data)
    }
}

/// Per-layer activations plus the manifest binding frames to utterances.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStore {
    layers: Vec<LayerActivations>,
    manifest: Manifest,
}

impl ActivationStore {
    pub fn new(mut layers: Vec<LayerActivations>, manifest: Manifest) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("activation store has no layers".into()));
        }
        layers.sort_by_key(|l| l.layer_index);
        for pair in layers.windows(2) {
            if pair[0].layer_index == pair[1].layer_index {
                return Err(Error::Validation(format!(
                    "duplicate layer index {}",
                    pair[0].layer_index
                )));
            }
        }
        let frames = layers[0].frames();
        let width = layers[0].width();
        for l in &layers {
            if l.frames() == 0 || l.width() == 0 {
                return Err(Error::Validation(format!(
                    "layer {} has empty shape {:?}",
                    l.layer_index,
                    l.data.dim()
                )));
            }
            if l.frames() != frames {
                return Err(Error::Validation(format!(
                    "layer {} has {} frames, layer {} has {frames}",
                    l.layer_index,
                    l.frames(),
                    layers[0].layer_index
                )));
            }
            if l.width() != width {
                return Err(Error::Validation(format!(
                    "layer {} has width {}, layer {} has {width}",
                    l.layer_index,
                    l.width(),
                    layers[0].layer_index
                )));
            }
            l.check_finite()?;
        }
        manifest.validate()?;
        if manifest.frame_count() != frames {
            return Err(Error::Manifest(format!(
                "manifest covers {} frames but activations have {frames}",
                manifest.frame_count()
            )));
        }
        Ok(ActivationStore { layers, manifest })
    }

    pub fn layers(&self) -> &[LayerActivations] {
        &self.layers
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn frames(&self) -> usize {
        self.layers[0].frames()
    }

    pub fn width(&self) -> usize {
        self.layers[0].width()
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer_index).collect()
    }

    /// Keeps only the listed hidden dims of each layer, in the listed order.
    pub fn select_dims(&self, kept: &BTreeMap<usize, Vec<u32>>) -> Result<ActivationStore> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let idx = kept
                .get(&l.layer_index)
                .ok_or_else(|| Error::Validation(format!("no kept dims given for layer {}", l.layer_index)))?;
            let cols: Vec<usize> = idx.iter().map(|&d| d as usize).collect();
            if let Some(&bad) = cols.iter().find(|&&d| d >= l.width()) {
                return Err(Error::Validation(format!(
                    "dim {bad} out of range for layer {} of width {}",
                    l.layer_index,
                    l.width()
                )));
            }
            layers.push(LayerActivations {
                layer_index: l.layer_index,
                data: l.data.select(Axis(1), &cols),
            });
        }
        Ok(ActivationStore {
            layers,
            manifest: self.manifest.clone(),
        })
    }

    /// Writes `layer_<n>.npy` files into `dir` and the manifest to `manifest_path`.
    pub fn save(&self, dir: &Path, manifest_path: &Path) -> Result<()> {
        for l in &self.layers {
            npy::write_f32_matrix(&dir.join(layer_file_name(l.layer_index)), &l.data)?;
        }
        self.manifest.save(manifest_path)
    }
}

pub fn layer_file_name(layer: usize) -> String {
    format!("layer_{layer:02}.npy")
}

fn parse_layer_file_name(name: &str) -> Option<usize> {
    name.strip_prefix("layer_")?.strip_suffix(".npy")?.parse().ok()
}

/// Lists `(layer_index, path)` pairs of a layer directory, sorted by layer.
pub fn list_layer_files(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(parse_layer_file_name) {
            files.push((idx, entry.path()));
        }
    }
    if files.is_empty() {
        return Err(Error::format(dir.display().to_string(), "no layer_<n>.npy files found"));
    }
    files.sort();
    Ok(files)
}

/// Loads and validates an activation store.
///
/// `path` is either a directory of `layer_<n>.npy` files or a single `.npy`
/// file, which is taken to be layer 0.
pub fn load_activations(path: &Path, manifest_path: &Path) -> Result<ActivationStore> {
    let files = if path.is_dir() {
        list_layer_files(path)?
    } else if path.exists() {
        vec![(0, path.to_path_buf())]
    } else {
        return Err(Error::NotFound(path.to_path_buf()));
    };
    let manifest = Manifest::load(manifest_path)?;
    let mut layers = Vec::with_capacity(files.len());
    for (layer_index, file) in files {
        let data = npy::read_f32_matrix(&file)?;
        layers.push(LayerActivations { layer_index, data });
    }
    ActivationStore::new(layers, manifest)
}

/// Rows to cluster: frames for SSL clustering, utterances for i-vector clustering.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Array2<f32>,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::Validation(format!(
                "feature matrix has empty shape {:?}",
                data.dim()
            )));
        }
        if let Some(((r, c), v)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature {v} at row {r}, column {c}")));
        }
        Ok(FeatureMatrix { data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        FeatureMatrix::new(npy::read_f32_matrix(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        npy::write_f32_matrix(path, &self.data)
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }
}

#[derive(Serialize, Deserialize)]
struct NeuronSetFile {
    version: u32,
    #[serde(flatten)]
    set: NeuronSet,
}

#[derive(Serialize, Deserialize)]
struct NeuronSetCollectionFile {
    version: u32,
    sets: Vec<NeuronSet>,
}

fn check_version(path: &Path, version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported version {version}"),
        ));
    }
    Ok(())
}

pub fn save_neuron_set(set: &NeuronSet, path: &Path) -> Result<()> {
    let mut set = set.clone();
    set.normalize()?;
    write_json(
        path,
        &NeuronSetFile {
            version: FORMAT_VERSION,
            set,
        },
    )
}

pub fn load_neuron_set(path: &Path) -> Result<NeuronSet> {
    let file: NeuronSetFile = read_json(path)?;
    check_version(path, file.version)?;
    let mut set = file.set;
    set.normalize()?;
    Ok(set)
}

/// Writes several sets into one file `{version: 1, sets: [...]}`.
pub fn save_neuron_sets(sets: &[NeuronSet], path: &Path) -> Result<()> {
    let mut sets = sets.to_vec();
    for s in &mut sets {
        s.normalize()?;
    }
    write_json(
        path,
        &NeuronSetCollectionFile {
            version: FORMAT_VERSION,
            sets,
        },
    )
}

pub fn load_neuron_sets(path: &Path) -> Result<Vec<NeuronSet>> {
    let file: NeuronSetCollectionFile = read_json(path)?;
    check_version(path, file.version)?;
    let mut sets = file.sets;
    for s in &mut sets {
        s.normalize()?;
    }
    Ok(sets)
}
