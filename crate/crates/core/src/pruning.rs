//! Magnitude-based structured pruning of FFN hidden dims, with protection.
//!
//! A hidden dim owns row `d` of the first projection, entry `d` of its bias
//! and column `d` of the second projection; pruning removes all three.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json};
use crate::neuron_id::{LayerIndices, NeuronSet, Provenance};
use crate::npy;
use crate::tensor_io::FORMAT_VERSION;

/// Default number of training steps between iterative pruning steps.
pub const DEFAULT_PRUNE_INTERVAL: u64 = 25_000;

#[derive(Debug, Clone, PartialEq)]
pub struct FfnLayer {
    pub layer: usize,
    /// `D x D_model`; row `d` feeds hidden dim `d`.
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    /// `D_model x D`; column `d` reads hidden dim `d`.
    pub w2: Array2<f32>,
}

impl FfnLayer {
    pub fn width(&self) -> usize {
        self.w1.nrows()
    }

    fn validate(&self) -> Result<()> {
        let d = self.w1.nrows();
        if d == 0 || self.w1.ncols() == 0 {
            return Err(Error::Validation(format!(
                "layer {}: empty first projection",
                self.layer
            )));
        }
        if self.b1.len() != d || self.w2.ncols() != d {
            return Err(Error::Validation(format!(
                "layer {}: W1 has {d} rows, b1 has {} entries, W2 has {} columns",
                self.layer,
                self.b1.len(),
                self.w2.ncols()
            )));
        }
        if self.w2.nrows() != self.w1.ncols() {
            return Err(Error::Validation(format!(
                "layer {}: model width {} (W1) vs {} (W2)",
                self.layer,
                self.w1.ncols(),
                self.w2.nrows()
            )));
        }
        let finite = self
            .w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data(format!("layer {}: non-finite weight", self.layer)));
        }
        Ok(())
    }

    /// `W2 · act(W1 x + b1)`; hidden units outside `keep` (when given) are zeroed
    /// after the nonlinearity.
    pub fn forward(&self, x: &[f32], act: impl Fn(f32) -> f32, keep: Option<&[u32]>) -> Vec<f32> {
        let mut mask = vec![keep.is_none(); self.width()];
        for &d in keep.unwrap_or(&[]) {
            mask[d as usize] = true;
        }
        let hidden: Vec<f32> = self
            .w1
            .outer_iter()
            .zip(self.b1.iter())
            .zip(&mask)
            .map(|((row, b), &on)| {
                if !on {
                    return 0.0;
                }
                act(row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + b)
            })
            .collect();
        self.w2
            .outer_iter()
            .map(|row| row.iter().zip(&hidden).map(|(w, h)| w * h).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub layers: Vec<FfnLayer>,
}

impl FfnWeights {
    pub fn new(mut layers: Vec<FfnLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("no FFN layers".into()));
        }
        layers.sort_by_key(|l| l.layer);
        for l in &layers {
            l.validate()?;
        }
        for pair in layers.windows(2) {
            if pair[0].layer == pair[1].layer {
                return Err(Error::Validation(format!("duplicate FFN layer {}", pair[0].layer)));
            }
        }
        Ok(FfnWeights { layers })
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    /// Hidden width shared by all layers, if uniform.
    pub fn width(&self) -> Option<usize> {
        let w = self.layers[0].width();
        self.layers.iter().all(|l| l.width() == w).then_some(w)
    }

    fn file(dir: &Path, layer: usize, part: &str) -> std::path::PathBuf {
        dir.join(format!("layer_{layer:02}_{part}.npy"))
    }

    /// Reads `layer_<n>_w1.npy`, `layer_<n>_b1.npy` and `layer_<n>_w2.npy` triples.
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(id) = name
                .strip_prefix("layer_")
                .and_then(|s| s.strip_suffix("_w1.npy"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                ids.push(id);
            }
        }
        if ids.is_empty() {
            return Err(Error::format(
                dir.display().to_string(),
                "no layer_<n>_w1.npy files found",
            ));
        }
        ids.sort_unstable();
        let layers = ids
            .into_iter()
            .map(|layer| {
                let b1 = npy::read_f32_matrix(&Self::file(dir, layer, "b1"))?;
                Ok(FfnLayer {
                    layer,
                    w1: npy::read_f32_matrix(&Self::file(dir, layer, "w1"))?,
                    b1: Array1::from_iter(b1.iter().copied()),
                    w2: npy::read_f32_matrix(&Self::file(dir, layer, "w2"))?,
                })
            })
            .collect::<Result<_>>()?;
        FfnWeights::new(layers)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for l in &self.layers {
            npy::write_f32_matrix(&Self::file(dir, l.layer, "w1"), &l.w1)?;
            npy::write_f32_matrix(&Self::file(dir, l.layer, "b1"), &l.b1.clone().insert_axis(Axis(0)))?;
            npy::write_f32_matrix(&Self::file(dir, l.layer, "w2"), &l.w2)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    pub scores: Vec<f64>,
}

/// `|W1[d, :]|_1 + |W2[:, d]|_1 + |b1[d]|` for every hidden dim `d`.
pub fn l1_scores(weights: &FfnWeights) -> Vec<LayerScores> {
    weights
        .layers
        .iter()
        .map(|l| {
            let scores = (0..l.width())
                .map(|d| {
                    let row: f64 = l.w1.row(d).iter().map(|v| v.abs() as f64).sum();
                    let col: f64 = l.w2.column(d).iter().map(|v| v.abs() as f64).sum();
                    row + col + l.b1[d].abs() as f64
                })
                .collect();
            LayerScores { layer: l.layer, scores }
        })
        .collect()
}

/// Dims ordered from most to least worth keeping: higher score first, ties to
/// the lower index.
fn keep_order(scores: &[f64], candidates: impl Iterator<Item = u32>) -> Vec<u32> {
    let mut idx: Vec<u32> = candidates.collect();
    idx.sort_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]).then(a.cmp(&b)));
    idx
}

fn top_n(scores: &[f64], n: usize) -> Vec<u32> {
    let mut kept = keep_order(scores, 0..scores.len() as u32);
    kept.truncate(n);
    kept.sort_unstable();
    kept
}

/// Kept hidden dims per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMask {
    pub method_tag: String,
    pub target_avg_dims: f64,
    /// Original hidden width `D`.
    pub width: usize,
    pub layers: Vec<LayerIndices>,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    version: u32,
    #[serde(flatten)]
    mask: PruneMask,
}

impl PruneMask {
    pub fn kept(&self, layer: usize) -> Option<&[u32]> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .map(|l| l.indices.as_slice())
    }

    pub fn total_kept(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    pub fn average_kept(&self) -> f64 {
        self.total_kept() as f64 / self.layers.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            if l.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!(
                    "mask '{}': layer {} indices are not strictly increasing",
                    self.method_tag, l.layer
                )));
            }
            if let Some(&bad) = l.indices.last().filter(|&&d| d as usize >= self.width) {
                return Err(Error::Validation(format!(
                    "mask '{}': index {bad} out of range [0, {}) in layer {}",
                    self.method_tag, self.width, l.layer
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_json(
            path,
            &MaskFile {
                version: FORMAT_VERSION,
                mask: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: MaskFile = read_json(path)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!("unsupported version {}", file.version),
            ));
        }
        let mut mask = file.mask;
        for l in &mut mask.layers {
            l.indices.sort_unstable();
            l.indices.dedup();
        }
        mask.validate()?;
        Ok(mask)
    }
}

fn scores_for(scores: &[LayerScores], layer: usize) -> Result<&[f64]> {
    scores
        .iter()
        .find(|s| s.layer == layer)
        .map(|s| s.scores.as_slice())
        .ok_or_else(|| Error::Validation(format!("no scores for layer {layer}")))
}

/// Keeps exactly the protected dims of every layer. A layer with nothing
/// protected falls back to its `max(1, round(0.1 * avg))` highest-scoring
/// dims, where `avg` is the mean protected count.
pub fn one_shot_protected_mask(protected: &NeuronSet, scores: &[LayerScores]) -> Result<PruneMask> {
    if protected.layers.is_empty() {
        return Err(Error::Validation("protected set has no layers".into()));
    }
    let avg = protected.total() as f64 / protected.layers.len() as f64;
    let fallback = ((avg * 0.1).round() as usize).max(1);
    let mut layers = Vec::with_capacity(protected.layers.len());
    for l in &protected.layers {
        let indices = if l.indices.is_empty() {
            let s = scores_for(scores, l.layer)?;
            log::warn!(
                "layer {}: no protected dims; keeping the {fallback} highest-scoring dims",
                l.layer
            );
            top_n(s, fallback.min(s.len()))
        } else {
            l.indices.clone()
        };
        layers.push(LayerIndices {
            layer: l.layer,
            indices,
        });
    }
    let total: usize = layers.iter().map(|l| l.indices.len()).sum();
    Ok(PruneMask {
        method_tag: "one_shot_protected".into(),
        target_avg_dims: total as f64 / layers.len() as f64,
        width: protected.width,
        layers,
        provenance: protected.provenance.clone(),
    })
}

/// Keeps the `round(target_avg_dims)` highest-scoring dims in every layer.
pub fn one_shot_baseline_mask(scores: &[LayerScores], width: usize, target_avg_dims: f64) -> Result<PruneMask> {
    if !(target_avg_dims >= 1.0 && target_avg_dims <= width as f64) {
        return Err(Error::Parameter(format!(
            "target_avg_dims must be in [1, {width}], got {target_avg_dims}"
        )));
    }
    let n = target_avg_dims.round() as usize;
    let layers = scores
        .iter()
        .map(|s| {
            if s.scores.len() != width {
                return Err(Error::Validation(format!(
                    "layer {} has {} scores, expected {width}",
                    s.layer,
                    s.scores.len()
                )));
            }
            Ok(LayerIndices {
                layer: s.layer,
                indices: top_n(&s.scores, n),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PruneMask {
        method_tag: "one_shot_l1".into(),
        target_avg_dims,
        width,
        layers,
        provenance: Provenance::default(),
    })
}

/// Supplies ℓ1 scores before each iterative pruning step.
///
/// Scores are indexed by original hidden dim. An implementation embedded in a
/// trainer fine-tunes between calls and returns scores of the updated weights;
/// only the currently kept dims are read.
pub trait ScoreSource {
    fn scores(&mut self, step: usize, kept: &[LayerIndices]) -> Result<Vec<LayerScores>>;
}

/// Scores computed once and reused at every step.
pub struct FrozenScores(pub Vec<LayerScores>);

impl ScoreSource for FrozenScores {
    fn scores(&mut self, _step: usize, _kept: &[LayerIndices]) -> Result<Vec<LayerScores>> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Dims removed per layer per step.
    pub step_dims: usize,
    /// Dims left per layer after the last step.
    pub final_dims: usize,
    /// Training steps between pruning steps.
    pub interval: u64,
}

impl ScheduleConfig {
    pub fn new(step_dims: usize, final_dims: usize) -> Self {
        ScheduleConfig {
            step_dims,
            final_dims,
            interval: DEFAULT_PRUNE_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    /// 1-based pruning step.
    pub step: usize,
    pub apply_at_training_step: u64,
    pub layers: Vec<LayerIndices>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    pub method_tag: String,
    pub width: usize,
    pub config: ScheduleConfig,
    pub steps: Vec<ScheduleStep>,
    #[serde(default)]
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    version: u32,
    #[serde(flatten)]
    schedule: MaskSchedule,
}

impl MaskSchedule {
    pub fn mask(&self, i: usize) -> PruneMask {
        let step = &self.steps[i];
        let total: usize = step.layers.iter().map(|l| l.indices.len()).sum();
        PruneMask {
            method_tag: format!("{}@{}", self.method_tag, step.step),
            target_avg_dims: total as f64 / step.layers.len().max(1) as f64,
            width: self.width,
            layers: step.layers.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn final_mask(&self) -> Option<PruneMask> {
        (!self.steps.is_empty()).then(|| self.mask(self.steps.len() - 1))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(
            path,
            &ScheduleFile {
                version: FORMAT_VERSION,
                schedule: self.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ScheduleFile = read_json(path)?;
        if file.version != FORMAT_VERSION {
            return Err(Error::format(
                path.display().to_string(),
                format!("unsupported version {}", file.version),
            ));
        }
        Ok(file.schedule)
    }
}

/// Builds a schedule that removes `step_dims` of the lowest-scoring
/// unprotected dims from every layer per step until `final_dims` remain.
pub fn iterative_schedule(
    source: &mut dyn ScoreSource,
    layer_ids: &[usize],
    width: usize,
    protected: Option<&NeuronSet>,
    config: &ScheduleConfig,
) -> Result<MaskSchedule> {
    if config.step_dims == 0 {
        return Err(Error::Parameter("step_dims must be at least 1".into()));
    }
    if config.final_dims == 0 || config.final_dims >= width {
        return Err(Error::Parameter(format!(
            "final_dims must be in [1, {width}), got {}",
            config.final_dims
        )));
    }
    let mut shielded: Vec<Vec<bool>> = Vec::with_capacity(layer_ids.len());
    for &layer in layer_ids {
        let mut mask = vec![false; width];
        if let Some(p) = protected {
            if p.width != width {
                return Err(Error::Validation(format!(
                    "protected set width {} does not match {width}",
                    p.width
                )));
            }
            let dims = p.layer(layer).unwrap_or(&[]);
            if dims.len() > config.final_dims {
                return Err(Error::BudgetConflict(format!(
                    "layer {layer}: {} protected dims exceed final_dims = {}",
                    dims.len(),
                    config.final_dims
                )));
            }
            for &d in dims {
                mask[d as usize] = true;
            }
        }
        shielded.push(mask);
    }

    let mut kept: Vec<LayerIndices> = layer_ids
        .iter()
        .map(|&layer| LayerIndices {
            layer,
            indices: (0..width as u32).collect(),
        })
        .collect();
    let mut steps = Vec::new();
    let mut step = 0;
    while kept[0].indices.len() > config.final_dims {
        step += 1;
        let scores = source.scores(step, &kept)?;
        for (li, layer) in kept.iter_mut().enumerate() {
            let s = scores_for(&scores, layer.layer)?;
            if s.len() != width {
                return Err(Error::Validation(format!(
                    "layer {} has {} scores, expected {width}",
                    layer.layer,
                    s.len()
                )));
            }
            let remove = config.step_dims.min(layer.indices.len() - config.final_dims);
            let candidates = layer.indices.iter().copied().filter(|&d| !shielded[li][d as usize]);
            let order = keep_order(s, candidates);
            let mut drop = vec![false; width];
            for &d in order.iter().rev().take(remove) {
                drop[d as usize] = true;
            }
            layer.indices.retain(|&d| !drop[d as usize]);
        }
        steps.push(ScheduleStep {
            step,
            apply_at_training_step: step as u64 * config.interval,
            layers: kept.clone(),
        });
    }
    Ok(MaskSchedule {
        method_tag: if protected.is_some() {
            "iterative_protected".into()
        } else {
            "iterative_l1".into()
        },
        width,
        config: *config,
        steps,
        provenance: protected.map(|p| p.provenance.clone()).unwrap_or_default(),
    })
}

/// Compacts every layer to its kept dims: rows of W1, entries of b1 and
/// columns of W2, in mask order.
pub fn apply_mask(weights: &FfnWeights, mask: &PruneMask) -> Result<FfnWeights> {
    mask.validate()?;
    let layers = weights
        .layers
        .iter()
        .map(|l| {
            let kept = mask.kept(l.layer).ok_or_else(|| {
                Error::Validation(format!("mask '{}' has no entry for layer {}", mask.method_tag, l.layer))
            })?;
            if mask.width != l.width() {
                return Err(Error::Validation(format!(
                    "mask width {} does not match layer {} width {}",
                    mask.width,
                    l.layer,
                    l.width()
                )));
            }
            let idx: Vec<usize> = kept.iter().map(|&d| d as usize).collect();
            Ok(FfnLayer {
                layer: l.layer,
                w1: l.w1.select(Axis(0), &idx),
                b1: l.b1.select(Axis(0), &idx),
                w2: l.w2.select(Axis(1), &idx),
            })
        })
        .collect::<Result<_>>()?;
    Ok(FfnWeights { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron_id::Family;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_layer(layer: usize, d: usize, dm: usize, rng: &mut ChaCha8Rng) -> FfnLayer {
        FfnLayer {
            layer,
            w1: Array2::from_shape_fn((d, dm), |_| rng.gen_range(-1.0..1.0)),
            b1: Array1::from_shape_fn(d, |_| rng.gen_range(-0.1..0.1)),
            w2: Array2::from_shape_fn((dm, d), |_| rng.gen_range(-1.0..1.0)),
        }
    }

    fn scores(v: Vec<f64>) -> Vec<LayerScores> {
        vec![LayerScores { layer: 0, scores: v }]
    }

    fn protected(layers: Vec<Vec<u32>>, width: usize) -> NeuronSet {
        NeuronSet {
            family: Family::Protected,
            width,
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(layer, indices)| LayerIndices { layer, indices })
                .collect(),
            provenance: Provenance::default(),
        }
    }

    #[test]
    fn hand_computed_scores() {
        let w = FfnWeights::new(vec![FfnLayer {
            layer: 0,
            w1: arr2(&[[1.0, -1.0], [2.0, 2.0]]),
            b1: arr1(&[0.0, 0.0]),
            // second row zero-pads W2 to the model width of W1
            w2: arr2(&[[0.5, -0.5], [0.0, 0.0]]),
        }])
        .unwrap();
        assert_eq!(l1_scores(&w)[0].scores, vec![2.5, 4.5]);
        let z = FfnWeights::new(vec![FfnLayer {
            layer: 0,
            w1: Array2::zeros((3, 2)),
            b1: Array1::zeros(3),
            w2: Array2::zeros((2, 3)),
        }])
        .unwrap();
        assert_eq!(l1_scores(&z)[0].scores, vec![0.0; 3]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let bad = FfnLayer {
            layer: 0,
            w1: Array2::zeros((3, 2)),
            b1: Array1::zeros(2),
            w2: Array2::zeros((2, 3)),
        };
        assert!(FfnWeights::new(vec![bad]).is_err());
    }

    #[test]
    fn baseline_top_two() {
        let m = one_shot_baseline_mask(&scores(vec![3.0, 1.0, 4.0, 2.0]), 4, 2.0).unwrap();
        assert_eq!(m.layers[0].indices, vec![0, 2]);
        let all = one_shot_baseline_mask(&scores(vec![3.0, 1.0, 4.0, 2.0]), 4, 4.0).unwrap();
        assert_eq!(all.layers[0].indices, vec![0, 1, 2, 3]);
        assert!(matches!(
            one_shot_baseline_mask(&scores(vec![1.0; 4]), 4, 5.0),
            Err(Error::Parameter(_))
        ));
        assert!(one_shot_baseline_mask(&scores(vec![1.0; 4]), 4, 0.5).is_err());
    }

    #[test]
    fn protected_mask_accounting() {
        let sizes = [800u32, 900, 934];
        let p = protected(sizes.iter().map(|&n| (0..n).collect()).collect(), 3072);
        let s: Vec<LayerScores> = (0..3)
            .map(|layer| LayerScores {
                layer,
                scores: vec![0.0; 3072],
            })
            .collect();
        let m = one_shot_protected_mask(&p, &s).unwrap();
        assert_eq!(m.target_avg_dims, 878.0);

        let p = protected((0..12).map(|_| (0..867).collect()).collect(), 3072);
        let s: Vec<LayerScores> = (0..12)
            .map(|layer| LayerScores {
                layer,
                scores: vec![0.0; 3072],
            })
            .collect();
        let m = one_shot_protected_mask(&p, &s).unwrap();
        assert_eq!(m.total_kept(), 10404);
        assert_eq!(m.target_avg_dims, 867.0);

        let p = protected(vec![(0..8).collect()], 8);
        let m = one_shot_protected_mask(&p, &scores(vec![1.0; 8])).unwrap();
        let w = FfnWeights::new(vec![random_layer(0, 8, 3, &mut ChaCha8Rng::seed_from_u64(0))]).unwrap();
        assert_eq!(apply_mask(&w, &m).unwrap(), w);
    }

    #[test]
    fn empty_protected_layer_falls_back() {
        let p = protected(vec![(0..40).collect(), vec![]], 64);
        let mut s1 = vec![0.0; 64];
        s1[10] = 9.0;
        s1[20] = 8.0;
        s1[30] = 7.0;
        s1[40] = 6.0;
        let s = vec![
            LayerScores {
                layer: 0,
                scores: vec![1.0; 64],
            },
            LayerScores { layer: 1, scores: s1 },
        ];
        let m = one_shot_protected_mask(&p, &s).unwrap();
        // avg protected = 20, fallback keeps round(2.0) = 2
        assert_eq!(m.layers[1].indices, vec![10, 20]);
        assert_eq!(m.target_avg_dims, 21.0);
    }

    #[test]
    fn twenty_steps_to_512() {
        let s: Vec<LayerScores> = (0..2)
            .map(|layer| LayerScores {
                layer,
                scores: (0..3072).map(|d| ((d * 7919) % 3072) as f64).collect(),
            })
            .collect();
        let sched = iterative_schedule(
            &mut FrozenScores(s),
            &[0, 1],
            3072,
            None,
            &ScheduleConfig::new(128, 512),
        )
        .unwrap();
        assert_eq!(sched.steps.len(), 20);
        assert_eq!(sched.steps[0].apply_at_training_step, 25_000);
        assert_eq!(sched.steps[19].apply_at_training_step, 500_000);
        assert!(sched
            .steps
            .iter()
            .all(|s| s.layers.iter().all(|l| l.indices.len() >= 512)));
        assert_eq!(sched.final_mask().unwrap().total_kept(), 1024);
    }

    #[test]
    fn lowest_scored_protected_dim_survives() {
        let mut s = (0..64).map(|d| d as f64 + 1.0).collect::<Vec<_>>();
        s[17] = 0.0;
        let p = protected(vec![vec![17]], 64);
        let sched = iterative_schedule(
            &mut FrozenScores(scores(s)),
            &[0],
            64,
            Some(&p),
            &ScheduleConfig::new(5, 8),
        )
        .unwrap();
        for step in &sched.steps {
            assert!(step.layers[0].indices.contains(&17));
        }
        // last step removes only the remainder: 64 -> 59 ... -> 9 -> 8
        assert_eq!(sched.steps.len(), 12);
        assert_eq!(sched.steps.last().unwrap().layers[0].indices.len(), 8);
    }

    #[test]
    fn budget_conflict_names_layer() {
        let p = protected(vec![vec![], (0..10).collect()], 32);
        let s: Vec<LayerScores> = (0..2)
            .map(|layer| LayerScores {
                layer,
                scores: vec![1.0; 32],
            })
            .collect();
        let err =
            iterative_schedule(&mut FrozenScores(s), &[0, 1], 32, Some(&p), &ScheduleConfig::new(4, 8)).unwrap_err();
        assert!(
            matches!(err, Error::BudgetConflict(ref m) if m.contains("layer 1")),
            "{err}"
        );
    }

    #[test]
    fn refresh_hook_sees_each_step() {
        struct Recording(Vec<usize>);
        impl ScoreSource for Recording {
            fn scores(&mut self, step: usize, kept: &[LayerIndices]) -> Result<Vec<LayerScores>> {
                self.0.push(kept[0].indices.len());
                // prefer removing high indices first on step 1, low indices afterwards
                let s = (0..16)
                    .map(|d| if step == 1 { -(d as f64) } else { d as f64 })
                    .collect();
                Ok(vec![LayerScores { layer: 0, scores: s }])
            }
        }
        let mut src = Recording(Vec::new());
        let sched = iterative_schedule(&mut src, &[0], 16, None, &ScheduleConfig::new(4, 8)).unwrap();
        assert_eq!(src.0, vec![16, 12]);
        assert_eq!(sched.steps[0].layers[0].indices, (0..12).collect::<Vec<u32>>());
        assert_eq!(sched.steps[1].layers[0].indices, (4..12).collect::<Vec<u32>>());
    }

    #[test]
    fn slicing_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_layer(0, 3, 2, &mut rng);
        let w = FfnWeights::new(vec![l.clone()]).unwrap();
        let mask = PruneMask {
            method_tag: "t".into(),
            target_avg_dims: 2.0,
            width: 3,
            layers: vec![LayerIndices {
                layer: 0,
                indices: vec![0, 2],
            }],
            provenance: Provenance::default(),
        };
        let c = apply_mask(&w, &mask).unwrap();
        assert_eq!(c.layers[0].w1.row(0), l.w1.row(0));
        assert_eq!(c.layers[0].w1.row(1), l.w1.row(2));
        assert_eq!(c.layers[0].w2.column(1), l.w2.column(2));
        assert_eq!(c.layers[0].b1.to_vec(), vec![l.b1[0], l.b1[2]]);

        let bad = PruneMask {
            layers: vec![LayerIndices {
                layer: 0,
                indices: vec![3],
            }],
            ..mask
        };
        assert!(matches!(apply_mask(&w, &bad), Err(Error::Validation(_))));
    }

    #[test]
    fn weights_and_masks_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = FfnWeights::new(vec![random_layer(0, 6, 4, &mut rng), random_layer(1, 6, 4, &mut rng)]).unwrap();
        w.save(dir.path()).unwrap();
        assert_eq!(FfnWeights::load(dir.path()).unwrap(), w);

        let m = one_shot_baseline_mask(&l1_scores(&w), 6, 3.0).unwrap();
        let p = dir.path().join("mask.json");
        m.save(&p).unwrap();
        assert_eq!(PruneMask::load(&p).unwrap(), m);

        let sched = iterative_schedule(
            &mut FrozenScores(l1_scores(&w)),
            &[0, 1],
            6,
            None,
            &ScheduleConfig::new(2, 2),
        )
        .unwrap();
        let p = dir.path().join("sched.json");
        sched.save(&p).unwrap();
        assert_eq!(MaskSchedule::load(&p).unwrap(), sched);
        let raw: serde_json::Value = read_json(&p).unwrap();
        assert_eq!(raw["steps"][0]["apply_at_training_step"], 25_000);
        assert!(raw["steps"][0]["layers"][0]["indices"].is_array());
    }
}
