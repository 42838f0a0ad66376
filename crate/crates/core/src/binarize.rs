//! Top-λ% binarization of frame activation vectors.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::npy;
use crate::tensor_io::{layer_file_name, list_layer_files, LayerActivations};

/// Number of dims marked active per frame: `max(1, ceil(lambda * width / 100))`.
pub fn k_active(lambda_pct: f64, width: usize) -> usize {
    // The epsilon keeps products such as 0.7 * 100 from ceiling to 71.
    let raw = (lambda_pct * width as f64 / 100.0 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(width)
}

fn check_lambda(lambda_pct: f64) -> Result<()> {
    if !(lambda_pct > 0.0 && lambda_pct <= 100.0) {
        return Err(Error::Parameter(format!(
            "lambda_pct must be in (0, 100], got {lambda_pct}"
        )));
    }
    Ok(())
}

/// Binary activation pattern of one layer, stored as the sorted active dims of
/// each frame (exactly `k_active` per row).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPattern {
    layer_index: usize,
    width: usize,
    lambda_pct: f64,
    k_active: usize,
    active: Vec<u32>,
}

impl ActivationPattern {
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn lambda_pct(&self) -> f64 {
        self.lambda_pct
    }

    pub fn k_active(&self) -> usize {
        self.k_active
    }

    pub fn frames(&self) -> usize {
        self.active.len() / self.k_active
    }

    /// Active dims of frame `t`, ascending.
    pub fn row(&self, t: usize) -> &[u32] {
        &self.active[t * self.k_active..(t + 1) * self.k_active]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.active.chunks_exact(self.k_active)
    }

    /// Dense `T x D` 0/1 matrix.
    pub fn to_bits(&self) -> Array2<u8> {
        let mut bits = Array2::zeros((self.frames(), self.width));
        for (t, row) in self.rows().enumerate() {
            for &d in row {
                bits[[t, d as usize]] = 1;
            }
        }
        bits
    }

    /// Rebuilds a pattern from a dense 0/1 matrix, checking the row-sum invariant.
    pub fn from_bits(layer_index: usize, bits: &Array2<u8>, lambda_pct: f64) -> Result<Self> {
        check_lambda(lambda_pct)?;
        let (frames, width) = bits.dim();
        if frames == 0 || width == 0 {
            return Err(Error::Validation(format!(
                "pattern for layer {layer_index} has empty shape {:?}",
                bits.dim()
            )));
        }
        let k = k_active(lambda_pct, width);
        let mut active = Vec::with_capacity(frames * k);
        for (t, row) in bits.outer_iter().enumerate() {
            let before = active.len();
            for (d, &b) in row.iter().enumerate() {
                match b {
                    0 => {}
                    1 => active.push(d as u32),
                    other => {
                        return Err(Error::Validation(format!(
                            "layer {layer_index}, frame {t}, dim {d}: bit value {other} is not 0/1"
                        )))
                    }
                }
            }
            if active.len() - before != k {
                return Err(Error::Validation(format!(
                    "layer {layer_index}, frame {t}: {} active dims, expected {k}",
                    active.len() - before
                )));
            }
        }
        Ok(ActivationPattern {
            layer_index,
            width,
            lambda_pct,
            k_active: k,
            active,
        })
    }
}

/// Descending value, then ascending index. Values are finite, so
/// `partial_cmp` is total here and treats `-0.0 == 0.0`.
fn rank_order(values: &[f32], a: u32, b: u32) -> Ordering {
    values[b as usize]
        .partial_cmp(&values[a as usize])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// Sorted indices of the `k` largest entries, ties to the lower index.
pub fn top_k_indices(values: &[f32], k: usize, scratch: &mut Vec<u32>) -> Vec<u32> {
    scratch.clear();
    scratch.extend(0..values.len() as u32);
    if k < scratch.len() {
        scratch.select_nth_unstable_by(k, |&a, &b| rank_order(values, a, b));
    }
    let mut top = scratch[..k].to_vec();
    top.sort_unstable();
    top
}

/// Marks the `k_active` largest dims of every frame.
pub fn binarize_layer(acts: &LayerActivations, lambda_pct: f64) -> Result<ActivationPattern> {
    check_lambda(lambda_pct)?;
    let width = acts.width();
    if width == 0 {
        return Err(Error::Parameter("activation width must be at least 1".into()));
    }
    let k = k_active(lambda_pct, width);
    let rows: Vec<_> = acts.data.outer_iter().collect();
    let mut active = vec![0u32; rows.len() * k];
    active
        .par_chunks_mut(k)
        .zip(rows.par_iter())
        .try_for_each_init(Vec::new, |scratch, (out, row)| -> Result<()> {
            let owned;
            let values = match row.as_slice() {
                Some(s) => s,
                None => {
                    owned = row.to_vec();
                    &owned
                }
            };
            if let Some(v) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "non-finite activation {v} in layer {}",
                    acts.layer_index
                )));
            }
            out.copy_from_slice(&top_k_indices(values, k, scratch));
            Ok(())
        })?;
    Ok(ActivationPattern {
        layer_index: acts.layer_index,
        width,
        lambda_pct,
        k_active: k,
        active,
    })
}

/// Writes one `layer_<n>.npy` (`|u1`, shape `(T, D)`) per pattern.
pub fn save_patterns(patterns: &[ActivationPattern], dir: &Path) -> Result<()> {
    for p in patterns {
        npy::write_u8_matrix(&dir.join(layer_file_name(p.layer_index)), &p.to_bits())?;
    }
    Ok(())
}

pub fn load_patterns(dir: &Path, lambda_pct: f64) -> Result<Vec<ActivationPattern>> {
    list_layer_files(dir)?
        .into_iter()
        .map(|(layer, path)| {
            let bits = npy::read_u8_matrix(&path)?;
            ActivationPattern::from_bits(layer, &bits, lambda_pct)
        })
        .collect()
}
