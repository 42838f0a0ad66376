//! Cluster-conditioned neuron identification.
//!
//! A hidden dim `d` belongs to the group of a condition when the fraction of
//! that condition's frames in which `d` is active strictly exceeds `rho / 100`.
//! Conditions are an SSL cluster `c`, an i-vector cluster `g`, or the pair
//! `(g, c)`. The exclusive set of a family of groups keeps the dims that
//! appear in exactly one group.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binarize::ActivationPattern;
use crate::clustering::FrameClusterLabels;
use crate::error::{Error, Result};
use crate::io_util::{write_json, write_text};

/// Which neuron family a [`NeuronSet`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    /// Dims tied to SSL cluster `c`.
    GSsl(usize),
    /// Dims exclusive to a single SSL cluster.
    PSsl,
    /// Dims tied jointly to i-vector cluster `g` and SSL cluster `c`.
    GIveJoint(usize, usize),
    /// Intersection over SSL clusters of the joint groups of `g`.
    GIve(usize),
    /// Union over SSL clusters of the joint groups of `g`.
    AIve(usize),
    /// Dims tied to i-vector cluster `g` alone.
    BIve(usize),
    /// `BIve(g)` restricted to dims tied to every SSL cluster.
    CIve(usize),
    /// Dims exclusive to a single i-vector group.
    PIve,
    Protected,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::GSsl(c) => write!(f, "G_ssl({c})"),
            Family::PSsl => f.write_str("P_ssl"),
            Family::GIveJoint(g, c) => write!(f, "G_ive({g},{c})"),
            Family::GIve(g) => write!(f, "G_ive({g})"),
            Family::AIve(g) => write!(f, "A_ive({g})"),
            Family::BIve(g) => write!(f, "B_ive({g})"),
            Family::CIve(g) => write!(f, "C_ive({g})"),
            Family::PIve => f.write_str("P_ive"),
            Family::Protected => f.write_str("protected"),
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::format("neuron family", format!("unknown family '{s}'"));
        match s {
            "P_ssl" => return Ok(Family::PSsl),
            "P_ive" => return Ok(Family::PIve),
            "protected" => return Ok(Family::Protected),
            _ => {}
        }
        let open = s.find('(').ok_or_else(bad)?;
        let args = s[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let nums: Vec<usize> = args
            .split(',')
            .map(|a| a.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        match (&s[..open], nums.as_slice()) {
            ("G_ssl", [c]) => Ok(Family::GSsl(*c)),
            ("G_ive", [g, c]) => Ok(Family::GIveJoint(*g, *c)),
            ("G_ive", [g]) => Ok(Family::GIve(*g)),
            ("A_ive", [g]) => Ok(Family::AIve(*g)),
            ("B_ive", [g]) => Ok(Family::BIve(*g)),
            ("C_ive", [g]) => Ok(Family::CIve(*g)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for Family {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How per-i-vector-cluster groups are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IveMode {
    /// Intersect the joint `(g, c)` groups over `c`.
    #[default]
    Intersect,
    /// Union of the joint `(g, c)` groups over `c`.
    Union,
    /// Condition on `g` only.
    Uncond,
    /// Condition on `g` only, then intersect with every SSL cluster group.
    UncondIntersect,
}

impl IveMode {
    pub fn family(self, g: usize) -> Family {
        match self {
            IveMode::Intersect => Family::GIve(g),
            IveMode::Union => Family::AIve(g),
            IveMode::Uncond => Family::BIve(g),
            IveMode::UncondIntersect => Family::CIve(g),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IveMode::Intersect => "intersect",
            IveMode::Union => "union",
            IveMode::Uncond => "uncond",
            IveMode::UncondIntersect => "uncond_intersect",
        }
    }
}

/// Hyperparameters that produced a set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_ssl: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_ive: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<IveMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Resolved run configuration, echoed by the command-line tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerIndices {
    pub layer: usize,
    pub indices: Vec<u32>,
}

/// Per-layer sorted hidden-dim indices of one family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub family: Family,
    /// Hidden width `D` shared by all layers.
    pub width: usize,
    pub layers: Vec<LayerIndices>,
    #[serde(default)]
    pub provenance: Provenance,
}

impl NeuronSet {
    /// Sorts and dedups indices and layers; rejects indices `>= width`.
    pub fn normalize(&mut self) -> Result<()> {
        self.layers.sort_by_key(|l| l.layer);
        for pair in self.layers.windows(2) {
            if pair[0].layer == pair[1].layer {
                return Err(Error::Validation(format!(
                    "{}: layer {} listed twice",
                    self.family, pair[0].layer
                )));
            }
        }
        for l in &mut self.layers {
            l.indices.sort_unstable();
            l.indices.dedup();
            if let Some(&bad) = l.indices.last().filter(|&&d| d as usize >= self.width) {
                return Err(Error::Validation(format!(
                    "{}: index {bad} out of range [0, {}) in layer {}",
                    self.family, self.width, l.layer
                )));
            }
        }
        Ok(())
    }

    pub fn layer(&self, layer: usize) -> Option<&[u32]> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .map(|l| l.indices.as_slice())
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }
}

/// Frame and activation counts under one condition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConditionCounts {
    pub n_frames: u64,
    pub n_active: Vec<u64>,
}

impl ConditionCounts {
    fn zeros(width: usize) -> Self {
        ConditionCounts {
            n_frames: 0,
            n_active: vec![0; width],
        }
    }

    fn add(&mut self, other: &ConditionCounts) {
        self.n_frames += other.n_frames;
        for (a, b) in self.n_active.iter_mut().zip(&other.n_active) {
            *a += b;
        }
    }

    /// A condition without frames carries no estimate.
    pub fn is_supported(&self) -> bool {
        self.n_frames > 0
    }

    pub fn probability(&self, d: usize) -> Option<f64> {
        self.is_supported()
            .then(|| self.n_active[d] as f64 / self.n_frames as f64)
    }

    /// Dims whose activation frequency strictly exceeds `rho_pct` percent.
    pub fn above(&self, rho_pct: f64) -> Vec<u32> {
        let bar = rho_pct * self.n_frames as f64;
        self.n_active
            .iter()
            .enumerate()
            .filter(|(_, &n)| n as f64 * 100.0 > bar)
            .map(|(d, _)| d as u32)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub layer: usize,
    pub width: usize,
    /// Indexed by SSL cluster `c`.
    pub ssl: Vec<ConditionCounts>,
    /// Indexed by i-vector cluster `g`.
    pub ive: Vec<ConditionCounts>,
    /// Indexed by `g * k_ssl + c`.
    pub joint: Vec<ConditionCounts>,
}

impl LayerCounts {
    pub fn joint(&self, g: usize, c: usize) -> &ConditionCounts {
        &self.joint[g * self.ssl.len() + c]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoOccurrenceTable {
    pub k_ssl: usize,
    pub k_ive: usize,
    pub layers: Vec<LayerCounts>,
}

impl CoOccurrenceTable {
    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.width)
    }
}

/// Counts, per layer, how often each dim is active under every condition.
pub fn count_cooccurrence(patterns: &[ActivationPattern], labels: &FrameClusterLabels) -> Result<CoOccurrenceTable> {
    let (k_ssl, k_ive) = (labels.k_ssl, labels.k_ive);
    for p in patterns {
        if p.frames() != labels.frames() {
            return Err(Error::Validation(format!(
                "layer {} pattern has {} frames, labels have {}",
                p.layer_index(),
                p.frames(),
                labels.frames()
            )));
        }
    }
    let layers = patterns
        .par_iter()
        .map(|p| {
            let width = p.width();
            let mut joint = vec![ConditionCounts::zeros(width); k_ssl * k_ive];
            for (t, row) in p.rows().enumerate() {
                let cell = &mut joint[labels.ive[t] as usize * k_ssl + labels.ssl[t] as usize];
                cell.n_frames += 1;
                for &d in row {
                    cell.n_active[d as usize] += 1;
                }
            }
            let mut ssl = vec![ConditionCounts::zeros(width); k_ssl];
            let mut ive = vec![ConditionCounts::zeros(width); k_ive];
            for g in 0..k_ive {
                for c in 0..k_ssl {
                    let cell = &joint[g * k_ssl + c];
                    ssl[c].add(cell);
                    ive[g].add(cell);
                }
            }
            LayerCounts {
                layer: p.layer_index(),
                width,
                ssl,
                ive,
                joint,
            }
        })
        .collect();
    Ok(CoOccurrenceTable { k_ssl, k_ive, layers })
}

/// Dims that appear in exactly one of `groups`.
pub fn exclusive_members(groups: &[Vec<u32>], width: usize) -> Vec<u32> {
    let mut hits = vec![0u32; width];
    for g in groups {
        for &d in g {
            hits[d as usize] += 1;
        }
    }
    (0..width as u32).filter(|&d| hits[d as usize] == 1).collect()
}

pub fn intersect_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (mut i, mut j, mut out) = (0, 0, Vec::new());
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

pub fn union_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = a.iter().chain(b).copied().collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Intersection of `sets`; `None` when there is nothing to intersect.
fn intersect_all<'a>(sets: impl IntoIterator<Item = &'a Vec<u32>>) -> Option<Vec<u32>> {
    sets.into_iter().fold(None, |acc, s| {
        Some(match acc {
            None => s.clone(),
            Some(a) => intersect_sorted(&a, s),
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifyOptions {
    pub rho_pct: f64,
    /// Skip conditions that have no frames instead of failing. A skipped
    /// condition is left out of intersections and unions alike.
    pub skip_empty_conditions: bool,
}

impl IdentifyOptions {
    pub fn new(rho_pct: f64) -> Self {
        IdentifyOptions {
            rho_pct,
            skip_empty_conditions: false,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.rho_pct > 0.0 && self.rho_pct < 100.0) {
            return Err(Error::Parameter(format!(
                "rho_pct must be in (0, 100), got {}",
                self.rho_pct
            )));
        }
        Ok(())
    }

    /// `Ok(None)` for a skipped empty condition.
    fn group(&self, counts: &ConditionCounts, layer: usize, what: &str) -> Result<Option<Vec<u32>>> {
        if counts.is_supported() {
            Ok(Some(counts.above(self.rho_pct)))
        } else if self.skip_empty_conditions {
            log::warn!("layer {layer}: no frames for {what}; condition skipped");
            Ok(None)
        } else {
            Err(Error::Validation(format!(
                "layer {layer}: no frames for {what} (enable skip_empty_conditions to ignore)"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSsl {
    pub layer: usize,
    /// `G_ssl(c)` for every SSL cluster `c`.
    pub groups: Vec<Vec<u32>>,
    pub exclusive: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslNeurons {
    pub width: usize,
    pub layers: Vec<LayerSsl>,
}

fn ssl_groups(counts: &LayerCounts, opts: &IdentifyOptions) -> Result<Vec<Vec<u32>>> {
    counts
        .ssl
        .iter()
        .enumerate()
        .map(|(c, cc)| {
            Ok(opts
                .group(cc, counts.layer, &format!("SSL cluster {c}"))?
                .unwrap_or_default())
        })
        .collect()
}

/// SSL cluster neurons: `G_ssl(c)` per cluster and the exclusive set `P_ssl`.
pub fn identify_ssl_neurons(table: &CoOccurrenceTable, opts: &IdentifyOptions) -> Result<SslNeurons> {
    opts.check()?;
    let layers = table
        .layers
        .iter()
        .map(|lc| {
            let groups = ssl_groups(lc, opts)?;
            let exclusive = exclusive_members(&groups, lc.width);
            Ok(LayerSsl {
                layer: lc.layer,
                groups,
                exclusive,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SslNeurons {
        width: table.width(),
        layers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerIve {
    pub layer: usize,
    /// Joint groups `[g][c]`, present for the intersect and union modes.
    pub joint: Option<Vec<Vec<Vec<u32>>>>,
    /// Per-`g` groups of the selected mode.
    pub groups: Vec<Vec<u32>>,
    pub exclusive: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IveNeurons {
    pub width: usize,
    pub mode: IveMode,
    pub layers: Vec<LayerIve>,
}

fn ive_layer(lc: &LayerCounts, mode: IveMode, opts: &IdentifyOptions) -> Result<LayerIve> {
    let k_ssl = lc.ssl.len();
    let k_ive = lc.ive.len();
    let mut joint_out = None;
    let groups: Vec<Vec<u32>> = match mode {
        IveMode::Intersect | IveMode::Union => {
            let mut joint = Vec::with_capacity(k_ive);
            let mut groups = Vec::with_capacity(k_ive);
            for g in 0..k_ive {
                let mut per_c = Vec::with_capacity(k_ssl);
                let mut present = Vec::with_capacity(k_ssl);
                for c in 0..k_ssl {
                    let what = format!("i-vector cluster {g} with SSL cluster {c}");
                    match opts.group(lc.joint(g, c), lc.layer, &what)? {
                        Some(s) => {
                            present.push(s.clone());
                            per_c.push(s);
                        }
                        None => per_c.push(Vec::new()),
                    }
                }
                let group = if mode == IveMode::Intersect {
                    intersect_all(&present).unwrap_or_default()
                } else {
                    present.iter().fold(Vec::new(), |acc, s| union_sorted(&acc, s))
                };
                groups.push(group);
                joint.push(per_c);
            }
            joint_out = Some(joint);
            groups
        }
        IveMode::Uncond | IveMode::UncondIntersect => {
            let mut groups = (0..k_ive)
                .map(|g| {
                    Ok(opts
                        .group(&lc.ive[g], lc.layer, &format!("i-vector cluster {g}"))?
                        .unwrap_or_default())
                })
                .collect::<Result<Vec<_>>>()?;
            if mode == IveMode::UncondIntersect {
                let mut present = Vec::with_capacity(k_ssl);
                for (c, cc) in lc.ssl.iter().enumerate() {
                    if let Some(s) = opts.group(cc, lc.layer, &format!("SSL cluster {c}"))? {
                        present.push(s);
                    }
                }
                let shared = intersect_all(&present).unwrap_or_default();
                for g in &mut groups {
                    *g = intersect_sorted(g, &shared);
                }
            }
            groups
        }
    };
    let exclusive = exclusive_members(&groups, lc.width);
    Ok(LayerIve {
        layer: lc.layer,
        joint: joint_out,
        groups,
        exclusive,
    })
}

/// i-vector cluster neurons under `mode` and their exclusive set `P_ive`.
pub fn identify_ivector_neurons(
    table: &CoOccurrenceTable,
    mode: IveMode,
    opts: &IdentifyOptions,
) -> Result<IveNeurons> {
    opts.check()?;
    let layers = table
        .layers
        .iter()
        .map(|lc| ive_layer(lc, mode, opts))
        .collect::<Result<_>>()?;
    Ok(IveNeurons {
        width: table.width(),
        mode,
        layers,
    })
}

fn make_set(
    family: Family,
    width: usize,
    provenance: &Provenance,
    layers: impl Iterator<Item = (usize, Vec<u32>)>,
) -> NeuronSet {
    NeuronSet {
        family,
        width,
        layers: layers.map(|(layer, indices)| LayerIndices { layer, indices }).collect(),
        provenance: provenance.clone(),
    }
}

impl SslNeurons {
    pub fn group_sets(&self, provenance: &Provenance) -> Vec<NeuronSet> {
        let k = self.layers.first().map_or(0, |l| l.groups.len());
        (0..k)
            .map(|c| {
                make_set(
                    Family::GSsl(c),
                    self.width,
                    provenance,
                    self.layers.iter().map(|l| (l.layer, l.groups[c].clone())),
                )
            })
            .collect()
    }

    pub fn exclusive_set(&self, provenance: &Provenance) -> NeuronSet {
        make_set(
            Family::PSsl,
            self.width,
            provenance,
            self.layers.iter().map(|l| (l.layer, l.exclusive.clone())),
        )
    }
}

impl IveNeurons {
    fn provenance(&self, base: &Provenance) -> Provenance {
        Provenance {
            mode: Some(self.mode),
            ..base.clone()
        }
    }

    pub fn group_sets(&self, provenance: &Provenance) -> Vec<NeuronSet> {
        let provenance = self.provenance(provenance);
        let k = self.layers.first().map_or(0, |l| l.groups.len());
        (0..k)
            .map(|g| {
                make_set(
                    self.mode.family(g),
                    self.width,
                    &provenance,
                    self.layers.iter().map(|l| (l.layer, l.groups[g].clone())),
                )
            })
            .collect()
    }

    /// Joint `(g, c)` groups; empty for the unconditioned modes.
    pub fn joint_sets(&self, provenance: &Provenance) -> Vec<NeuronSet> {
        let provenance = self.provenance(provenance);
        let Some(first) = self.layers.first().and_then(|l| l.joint.as_ref()) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for g in 0..first.len() {
            for c in 0..first[g].len() {
                out.push(make_set(
                    Family::GIveJoint(g, c),
                    self.width,
                    &provenance,
                    self.layers.iter().map(|l| {
                        let joint = l.joint.as_ref().expect("all layers share a mode");
                        (l.layer, joint[g][c].clone())
                    }),
                ));
            }
        }
        out
    }

    pub fn exclusive_set(&self, provenance: &Provenance) -> NeuronSet {
        make_set(
            Family::PIve,
            self.width,
            &self.provenance(provenance),
            self.layers.iter().map(|l| (l.layer, l.exclusive.clone())),
        )
    }
}

/// Per-layer union of `P_ssl` and `P_ive`.
pub fn build_protected_set(p_ssl: &NeuronSet, p_ive: &NeuronSet) -> Result<NeuronSet> {
    if p_ssl.width != p_ive.width {
        return Err(Error::Validation(format!(
            "width mismatch: {} has {}, {} has {}",
            p_ssl.family, p_ssl.width, p_ive.family, p_ive.width
        )));
    }
    if p_ssl.layer_ids() != p_ive.layer_ids() {
        return Err(Error::Validation(format!(
            "layer mismatch: {} covers {:?}, {} covers {:?}",
            p_ssl.family,
            p_ssl.layer_ids(),
            p_ive.family,
            p_ive.layer_ids()
        )));
    }
    let layers = p_ssl
        .layers
        .iter()
        .zip(&p_ive.layers)
        .map(|(a, b)| LayerIndices {
            layer: a.layer,
            indices: union_sorted(&a.indices, &b.indices),
        })
        .collect();
    Ok(NeuronSet {
        family: Family::Protected,
        width: p_ssl.width,
        layers,
        provenance: Provenance {
            mode: p_ive.provenance.mode,
            ..p_ssl.provenance.clone()
        },
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub layer: usize,
    pub family: String,
    pub count: usize,
}

/// Per-layer neuron counts of every family, ready for plotting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub rows: Vec<CountRow>,
}

pub fn neuron_count_report(sets: &[NeuronSet]) -> CountReport {
    let rows = sets
        .iter()
        .flat_map(|s| {
            s.layers.iter().map(move |l| CountRow {
                layer: l.layer,
                family: s.family.to_string(),
                count: l.indices.len(),
            })
        })
        .collect();
    CountReport { rows }
}

impl CountReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row).map_err(|e| Error::Report(e.to_string()))?;
        }
        if self.rows.is_empty() {
            w.write_record(["layer", "family", "count"])
                .map_err(|e| Error::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .collect::<std::result::Result<Vec<CountRow>, _>>()
            .map_err(|e| Error::Report(format!("count csv: {e}")))?;
        Ok(CountReport { rows })
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        write_text(csv_path, &self.to_csv()?)?;
        write_json(json_path, self)
    }
}
