//! Command-line front end: one subcommand per pipeline stage plus `pipeline`.
//!
//! Every stage computes its results in memory before writing anything, and
//! every file is written through a temporary sibling and renamed into place.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::binarize::{k_active, load_patterns, save_patterns, ActivationPattern};
use crate::clustering::{
    cluster_composition, kmeans_fit, propagate_labels, ClusterModel, CompositionTable, FrameClusterLabels, KMeansParams,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io_util::{read_json, write_json, write_text};
use crate::neuron_id::Family;
use crate::neuron_id::{neuron_count_report, IdentifyOptions, IveMode, NeuronSet, Provenance};
use crate::pipeline::{binarize_store, identify, Identification};
use crate::pruning::{
    apply_mask, iterative_schedule, l1_scores, one_shot_baseline_mask, one_shot_protected_mask, FfnWeights,
    FrozenScores, PruneMask, ScheduleConfig,
};
use crate::synth::{centroid_probe, generate, ProbeResult, SetScore, SynthData, SynthSpec, PHONE_LABEL, SPEAKER_LABEL};
use crate::tensor_io::{
    load_activations, load_neuron_set, load_neuron_sets, save_neuron_set, save_neuron_sets, FeatureMatrix, Manifest,
};

/// Environment variable naming the run-config file when `--config` is absent.
pub const CONFIG_ENV: &str = "NEURONPRUNE_CONFIG";

const USAGE_EXIT: i32 = 2;

const EXIT_CODES: &str = "\
Exit codes:
   0  success
   2  usage error (unknown flag or bad flag value)
   3  input not found
   4  malformed file
   5  manifest error (frame-range gap or overlap, bad record)
   6  data error (non-finite value)
   7  validation error (invariant violated)
   8  parameter out of range
   9  budget conflict (protected dims exceed the pruning budget)
  10  report error (missing label column)
  11  configuration error
  12  other I/O error

On failure a JSON object {\"error\", \"message\", \"exit_code\"} is printed to stderr.";

#[derive(Debug, Parser)]
#[command(name = "neuronprune", version, about = "Cluster-conditioned neuron identification and protected FFN pruning", after_help = EXIT_CODES)]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default `out` next to the config file).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Top-lambda% binarization of every layer -> <out>/patterns
    Binarize {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        opts: BinarizeOpts,
    },
    /// SSL frame and i-vector utterance clustering -> <out>/clusters
    Kmeans {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        opts: KmeansOpts,
    },
    /// Cluster-conditioned neuron sets -> <out>/identify
    Identify {
        /// Pattern directory (default <out>/patterns).
        #[arg(long)]
        patterns: Option<PathBuf>,
        /// Frame cluster labels (default <out>/clusters/frame_labels.json).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        binarize: BinarizeOpts,
        #[command(flatten)]
        opts: IdentifyOpts,
    },
    /// One-shot and iterative masks, protected and l1 baseline -> <out>/prune
    Prune {
        /// Protected neuron set (default <out>/identify/protected.json).
        #[arg(long)]
        protected: Option<PathBuf>,
        #[command(flatten)]
        opts: PruneOpts,
    },
    /// Per-layer neuron counts and cluster composition tables -> <out>/report
    Report {
        /// Directory written by `identify` (default <out>/identify).
        #[arg(long)]
        identify_dir: Option<PathBuf>,
        /// Directory written by `kmeans` (default <out>/clusters).
        #[arg(long)]
        clusters_dir: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        opts: ReportOpts,
    },
    /// Synthetic planted-neuron dataset -> <out>/data
    Synth {
        /// Synth spec TOML (default: the config's [synth] section).
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// All stages on one config; generates data from [synth] when no activations are given
    Pipeline {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        binarize: BinarizeOpts,
        #[command(flatten)]
        kmeans: KmeansOpts,
        #[command(flatten)]
        identify: IdentifyOpts,
        #[command(flatten)]
        prune: PruneOpts,
        #[command(flatten)]
        report: ReportOpts,
    },
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Directory of layer_<n>.npy files, or a single .npy file.
    #[arg(long)]
    activations: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BinarizeOpts {
    #[arg(long = "lambda")]
    lambda_pct: Option<f64>,
}

#[derive(Debug, Args)]
struct KmeansOpts {
    #[arg(long)]
    ssl_features: Option<PathBuf>,
    /// Utterance embeddings; defaults to the manifest's embedding_ref entries.
    #[arg(long)]
    ivectors: Option<PathBuf>,
    #[arg(long)]
    k_ssl: Option<usize>,
    #[arg(long)]
    k_ive: Option<usize>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    standardize: bool,
}

#[derive(Debug, Args)]
struct IdentifyOpts {
    #[arg(long = "rho")]
    rho_pct: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<IveMode>,
    #[arg(long)]
    skip_empty_conditions: bool,
}

#[derive(Debug, Args)]
struct PruneOpts {
    /// Directory of layer_<n>_{w1,b1,w2}.npy files.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    step_dims: Option<usize>,
    #[arg(long)]
    final_dims: Option<usize>,
    #[arg(long)]
    prune_interval: Option<u64>,
    #[arg(long)]
    target_avg_dims: Option<f64>,
    /// Also write weights compacted to the protected mask.
    #[arg(long)]
    write_compacted: bool,
}

#[derive(Debug, Args)]
struct ReportOpts {
    #[arg(long)]
    ssl_label: Option<String>,
    #[arg(long)]
    ive_label: Option<String>,
}

fn absolute(p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, value: Option<PathBuf>) {
    if let Some(p) = value {
        *slot = Some(absolute(p));
    }
}

impl InputArgs {
    fn apply(self, c: &mut RunConfig) {
        set_path(&mut c.paths.activations, self.activations);
        set_path(&mut c.paths.manifest, self.manifest);
    }
}

impl BinarizeOpts {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.lambda_pct, self.lambda_pct);
    }
}

impl KmeansOpts {
    fn apply(self, c: &mut RunConfig) {
        set_path(&mut c.paths.ssl_features, self.ssl_features);
        set_path(&mut c.paths.ivectors, self.ivectors);
        set(&mut c.k_ssl, self.k_ssl);
        set(&mut c.k_ive, self.k_ive);
        set(&mut c.max_iters, self.max_iters);
        set(&mut c.tol, self.tol);
        c.standardize |= self.standardize;
    }
}

impl IdentifyOpts {
    fn apply(self, c: &mut RunConfig) {
        set(&mut c.rho_pct, self.rho_pct);
        set(&mut c.mode, self.mode);
        c.skip_empty_conditions |= self.skip_empty_conditions;
    }
}

impl PruneOpts {
    fn apply(self, c: &mut RunConfig) {
        set_path(&mut c.paths.weights, self.weights);
        set(&mut c.step_dims, self.step_dims);
        set(&mut c.final_dims, self.final_dims);
        set(&mut c.prune_interval, self.prune_interval);
        if self.target_avg_dims.is_some() {
            c.target_avg_dims = self.target_avg_dims;
        }
        c.write_compacted |= self.write_compacted;
    }
}

impl ReportOpts {
    fn apply(self, c: &mut RunConfig) {
        if self.ssl_label.is_some() {
            c.ssl_label = self.ssl_label;
        }
        if self.ive_label.is_some() {
            c.ive_label = self.ive_label;
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors are reported on stderr as JSON.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            report_error("usage", &e.to_string(), USAGE_EXIT);
            return USAGE_EXIT;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            report_error(e.kind(), &e.to_string(), e.exit_code());
            e.exit_code()
        }
    }
}

fn report_error(kind: &str, message: &str, code: i32) {
    let json = serde_json::json!({ "error": kind, "message": message.trim_end(), "exit_code": code });
    eprintln!("{json}");
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set_path(&mut cfg.paths.out_dir, cli.out_dir);
    set(&mut cfg.seed, cli.seed);

    match cli.command {
        Command::Binarize { input, opts } => {
            input.apply(&mut cfg);
            opts.apply(&mut cfg);
            cfg.validate()?;
            let store = load_store(&cfg)?;
            stage_binarize(&cfg, &store, &cfg.out_dir())?;
        }
        Command::Kmeans { manifest, opts } => {
            set_path(&mut cfg.paths.manifest, manifest);
            opts.apply(&mut cfg);
            cfg.validate()?;
            let manifest = Manifest::load(&cfg.required(&cfg.paths.manifest, "manifest")?)?;
            let (ssl, ive) = load_features(&cfg, &manifest)?;
            stage_kmeans(&cfg, &ssl, &ive, &manifest, &cfg.out_dir())?;
        }
        Command::Identify {
            patterns,
            labels,
            binarize,
            opts,
        } => {
            binarize.apply(&mut cfg);
            opts.apply(&mut cfg);
            cfg.validate()?;
            let out = cfg.out_dir();
            let patterns_dir = patterns.map(absolute).unwrap_or_else(|| out.join("patterns"));
            let labels_path = labels
                .map(absolute)
                .unwrap_or_else(|| out.join("clusters").join("frame_labels.json"));
            let patterns = load_patterns(&patterns_dir, cfg.lambda_pct)?;
            let labels = load_frame_labels(&labels_path)?;
            stage_identify(&cfg, &patterns, &labels, &out)?;
        }
        Command::Prune { protected, opts } => {
            opts.apply(&mut cfg);
            cfg.validate()?;
            let out = cfg.out_dir();
            let protected_path = protected
                .map(absolute)
                .unwrap_or_else(|| out.join("identify").join("protected.json"));
            let protected = load_neuron_set(&protected_path)?;
            let weights = FfnWeights::load(&cfg.required(&cfg.paths.weights, "weights")?)?;
            stage_prune(&cfg, &weights, &protected, &out)?;
        }
        Command::Report {
            identify_dir,
            clusters_dir,
            manifest,
            opts,
        } => {
            set_path(&mut cfg.paths.manifest, manifest);
            opts.apply(&mut cfg);
            cfg.validate()?;
            let out = cfg.out_dir();
            let identify_dir = identify_dir.map(absolute).unwrap_or_else(|| out.join("identify"));
            let clusters_dir = clusters_dir.map(absolute).unwrap_or_else(|| out.join("clusters"));
            let sets = load_identify_outputs(&identify_dir)?;
            let needs_clusters = cfg.ssl_label.is_some() || cfg.ive_label.is_some();
            let clusters = if needs_clusters {
                let manifest = Manifest::load(&cfg.required(&cfg.paths.manifest, "manifest")?)?;
                let ssl = ClusterModel::load(&clusters_dir.join("ssl_model.json"))?;
                let ive = ClusterModel::load(&clusters_dir.join("ive_model.json"))?;
                Some((ssl, ive, manifest))
            } else {
                None
            };
            let labels = (cfg.ssl_label.clone(), cfg.ive_label.clone());
            stage_report(&cfg, &sets, clusters.as_ref().map(|(s, i, m)| (s, i, m)), &labels, &out)?;
        }
        Command::Synth { spec } => {
            cfg.validate()?;
            let spec = match spec {
                Some(p) => SynthSpec::load(&p)?,
                None => cfg
                    .synth
                    .clone()
                    .ok_or_else(|| Error::Config("no --spec given and the config has no [synth] section".into()))?,
            };
            cfg.synth = Some(spec);
            cfg.validate()?;
            stage_synth(&cfg, &cfg.out_dir())?;
        }
        Command::Pipeline {
            input,
            binarize,
            kmeans,
            identify,
            prune,
            report,
        } => {
            input.apply(&mut cfg);
            binarize.apply(&mut cfg);
            kmeans.apply(&mut cfg);
            identify.apply(&mut cfg);
            prune.apply(&mut cfg);
            report.apply(&mut cfg);
            cfg.validate()?;
            run_pipeline(&cfg)?;
        }
    }
    Ok(())
}

/// JSON body with the resolved run config echoed alongside.
#[derive(Serialize)]
struct Echoed<'a, T: Serialize> {
    run_config: &'a Value,
    #[serde(flatten)]
    body: &'a T,
}

fn write_echoed<T: Serialize>(cfg: &RunConfig, path: &Path, body: &T) -> Result<()> {
    write_json(
        path,
        &Echoed {
            run_config: &cfg.echo(),
            body,
        },
    )
}

fn provenance(cfg: &RunConfig, source: &str) -> Provenance {
    Provenance {
        lambda_pct: Some(cfg.lambda_pct),
        rho_pct: Some(cfg.rho_pct),
        k_ssl: Some(cfg.k_ssl),
        k_ive: Some(cfg.k_ive),
        mode: Some(cfg.mode),
        seed: Some(cfg.seed),
        source: Some(source.into()),
        run_config: Some(cfg.echo()),
    }
}

fn load_store(cfg: &RunConfig) -> Result<crate::tensor_io::ActivationStore> {
    let acts = cfg.required(&cfg.paths.activations, "activations")?;
    let manifest = cfg.required(&cfg.paths.manifest, "manifest")?;
    if !acts.exists() {
        return Err(Error::NotFound(acts));
    }
    load_activations(&acts, &manifest)
}

fn load_features(cfg: &RunConfig, manifest: &Manifest) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let ssl = FeatureMatrix::load(&cfg.required(&cfg.paths.ssl_features, "ssl_features")?)?;
    let ive = match &cfg.paths.ivectors {
        Some(p) => FeatureMatrix::load(&cfg.resolve(p))?,
        None => manifest.load_embeddings()?,
    };
    Ok((ssl, ive))
}

fn load_frame_labels(path: &Path) -> Result<FrameClusterLabels> {
    let raw: FrameClusterLabels = read_json(path)?;
    FrameClusterLabels::new(raw.k_ssl, raw.k_ive, raw.ssl, raw.ive)
}

#[derive(Serialize)]
struct BinarizeSummary {
    lambda_pct: f64,
    width: usize,
    k_active: usize,
    frames: usize,
    layers: Vec<usize>,
}

fn stage_binarize(
    cfg: &RunConfig,
    store: &crate::tensor_io::ActivationStore,
    out: &Path,
) -> Result<Vec<ActivationPattern>> {
    let patterns = binarize_store(store, cfg.lambda_pct)?;
    let dir = out.join("patterns");
    save_patterns(&patterns, &dir)?;
    write_echoed(
        cfg,
        &dir.join("binarize.json"),
        &BinarizeSummary {
            lambda_pct: cfg.lambda_pct,
            width: store.width(),
            k_active: k_active(cfg.lambda_pct, store.width()),
            frames: store.frames(),
            layers: store.layer_indices(),
        },
    )?;
    log::info!("binarized {} layers into {}", patterns.len(), dir.display());
    Ok(patterns)
}

fn stage_kmeans(
    cfg: &RunConfig,
    ssl_features: &FeatureMatrix,
    ivectors: &FeatureMatrix,
    manifest: &Manifest,
    out: &Path,
) -> Result<(ClusterModel, ClusterModel, FrameClusterLabels)> {
    let params = |k| KMeansParams {
        k,
        seed: cfg.seed,
        max_iters: cfg.max_iters,
        tol: cfg.tol,
        standardize: cfg.standardize,
    };
    let ssl = kmeans_fit(ssl_features, &params(cfg.k_ssl))?;
    let ive = kmeans_fit(ivectors, &params(cfg.k_ive))?;
    let labels = propagate_labels(&ssl, &ive, manifest)?;
    let dir = out.join("clusters");
    write_echoed(cfg, &dir.join("ssl_model.json"), &ssl)?;
    write_echoed(cfg, &dir.join("ive_model.json"), &ive)?;
    write_echoed(cfg, &dir.join("frame_labels.json"), &labels)?;
    log::info!(
        "clustered {} frames into {:?} and {} utterances into {:?}",
        ssl.assignments.len(),
        ssl.cluster_sizes(),
        ive.assignments.len(),
        ive.cluster_sizes()
    );
    Ok((ssl, ive, labels))
}

fn stage_identify(
    cfg: &RunConfig,
    patterns: &[ActivationPattern],
    labels: &FrameClusterLabels,
    out: &Path,
) -> Result<Identification> {
    let opts = IdentifyOptions {
        rho_pct: cfg.rho_pct,
        skip_empty_conditions: cfg.skip_empty_conditions,
    };
    let prov = Provenance {
        k_ssl: Some(labels.k_ssl),
        k_ive: Some(labels.k_ive),
        ..provenance(cfg, "identify")
    };
    let id = identify(patterns, labels, cfg.mode, &opts, &prov)?;
    let dir = out.join("identify");
    save_neuron_sets(&id.ssl.group_sets(&prov), &dir.join("ssl_groups.json"))?;
    save_neuron_set(&id.p_ssl, &dir.join("p_ssl.json"))?;
    save_neuron_sets(&id.ive.group_sets(&prov), &dir.join("ive_groups.json"))?;
    save_neuron_sets(&id.ive.joint_sets(&prov), &dir.join("ive_joint.json"))?;
    save_neuron_set(&id.p_ive, &dir.join("p_ive.json"))?;
    save_neuron_set(&id.protected, &dir.join("protected.json"))?;
    log::info!(
        "identified {} P_ssl, {} P_ive and {} protected dims",
        id.p_ssl.total(),
        id.p_ive.total(),
        id.protected.total()
    );
    Ok(id)
}

#[derive(Serialize)]
struct KeptIndices<'a> {
    method_tag: &'a str,
    layers: &'a [crate::neuron_id::LayerIndices],
}

#[derive(Serialize)]
struct ScoresFile<'a> {
    layers: &'a [crate::pruning::LayerScores],
}

fn stage_prune(
    cfg: &RunConfig,
    weights: &FfnWeights,
    protected: &NeuronSet,
    out: &Path,
) -> Result<(PruneMask, PruneMask)> {
    let width = weights
        .width()
        .ok_or_else(|| Error::Validation("FFN layers differ in hidden width; masks need one shared width".into()))?;
    if protected.width != width {
        return Err(Error::Validation(format!(
            "protected set width {} does not match FFN width {width}",
            protected.width
        )));
    }
    let layer_ids = weights.layer_ids();
    if protected.layer_ids() != layer_ids {
        return Err(Error::Validation(format!(
            "protected set covers layers {:?}, weights cover {:?}",
            protected.layer_ids(),
            layer_ids
        )));
    }
    let scores = l1_scores(weights);
    let mut protected_mask = one_shot_protected_mask(protected, &scores)?;
    protected_mask.provenance = provenance(cfg, "prune");
    let target = cfg.target_avg_dims.unwrap_or_else(|| protected_mask.average_kept());
    let mut baseline_mask = one_shot_baseline_mask(&scores, width, target)?;
    baseline_mask.provenance = provenance(cfg, "prune");

    let schedule_cfg = ScheduleConfig {
        step_dims: cfg.step_dims,
        final_dims: cfg.final_dims,
        interval: cfg.prune_interval,
    };
    let mut protected_schedule = iterative_schedule(
        &mut FrozenScores(scores.clone()),
        &layer_ids,
        width,
        Some(protected),
        &schedule_cfg,
    )?;
    protected_schedule.provenance = provenance(cfg, "prune");
    let mut baseline_schedule = iterative_schedule(
        &mut FrozenScores(scores.clone()),
        &layer_ids,
        width,
        None,
        &schedule_cfg,
    )?;
    baseline_schedule.provenance = provenance(cfg, "prune");
    let compacted = if cfg.write_compacted {
        Some(apply_mask(weights, &protected_mask)?)
    } else {
        None
    };

    let dir = out.join("prune");
    write_echoed(cfg, &dir.join("scores.json"), &ScoresFile { layers: &scores })?;
    protected_mask.save(&dir.join("mask_protected.json"))?;
    baseline_mask.save(&dir.join("mask_baseline.json"))?;
    protected_schedule.save(&dir.join("schedule_protected.json"))?;
    baseline_schedule.save(&dir.join("schedule_baseline.json"))?;
    if let Some(w) = compacted {
        let cdir = dir.join("compacted");
        w.save(&cdir)?;
        write_echoed(
            cfg,
            &cdir.join("kept_indices.json"),
            &KeptIndices {
                method_tag: &protected_mask.method_tag,
                layers: &protected_mask.layers,
            },
        )?;
    }
    log::info!(
        "protected mask keeps {:.1} dims per layer; schedule has {} steps",
        protected_mask.average_kept(),
        protected_schedule.steps.len()
    );
    Ok((protected_mask, baseline_mask))
}

/// Reads the neuron sets written by `identify`.
fn load_identify_outputs(dir: &Path) -> Result<Vec<NeuronSet>> {
    let mut sets = load_neuron_sets(&dir.join("ssl_groups.json"))?;
    sets.push(load_neuron_set(&dir.join("p_ssl.json"))?);
    sets.extend(load_neuron_sets(&dir.join("ive_groups.json"))?);
    sets.extend(load_neuron_sets(&dir.join("ive_joint.json"))?);
    sets.push(load_neuron_set(&dir.join("p_ive.json"))?);
    sets.push(load_neuron_set(&dir.join("protected.json"))?);
    Ok(sets)
}

fn identify_outputs(id: &Identification, prov: &Provenance) -> Vec<NeuronSet> {
    let mut sets = id.ssl.group_sets(prov);
    sets.push(id.p_ssl.clone());
    sets.extend(id.ive.group_sets(prov));
    sets.extend(id.ive.joint_sets(prov));
    sets.push(id.p_ive.clone());
    sets.push(id.protected.clone());
    sets
}

fn write_composition(cfg: &RunConfig, table: &CompositionTable, dir: &Path, stem: &str) -> Result<()> {
    write_text(&dir.join(format!("{stem}.csv")), &table.to_csv()?)?;
    write_echoed(cfg, &dir.join(format!("{stem}.json")), table)
}

fn stage_report(
    cfg: &RunConfig,
    sets: &[NeuronSet],
    clusters: Option<(&ClusterModel, &ClusterModel, &Manifest)>,
    (ssl_label, ive_label): &(Option<String>, Option<String>),
    out: &Path,
) -> Result<()> {
    let counts = neuron_count_report(sets);
    let mut tables = Vec::new();
    if let Some((ssl, ive, manifest)) = clusters {
        if let Some(label) = ssl_label {
            let refs = manifest.frame_labels(label)?;
            tables.push((
                "ssl_composition",
                cluster_composition(&ssl.assignments, ssl.k, label, &refs)?,
            ));
        }
        if let Some(label) = ive_label {
            let refs = manifest.utterance_labels(label)?;
            tables.push((
                "ive_composition",
                cluster_composition(&ive.assignments, ive.k, label, &refs)?,
            ));
        }
    }
    let dir = out.join("report");
    write_text(&dir.join("neuron_counts.csv"), &counts.to_csv()?)?;
    write_echoed(cfg, &dir.join("neuron_counts.json"), &counts)?;
    for (stem, table) in &tables {
        write_composition(cfg, table, &dir, stem)?;
    }
    Ok(())
}

fn stage_synth(cfg: &RunConfig, out: &Path) -> Result<SynthData> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("no [synth] section".into()))?;
    let data = generate(spec)?;
    data.save(&out.join("data"))?;
    log::info!(
        "generated {} frames x {} dims in {} layers",
        spec.frames,
        spec.width,
        spec.layers
    );
    Ok(data)
}

#[derive(Serialize)]
struct Recovery {
    p_ssl: SetScore,
    p_ive: SetScore,
    recall: f64,
    precision: f64,
}

#[derive(Serialize)]
struct ProbeReport {
    label: String,
    unpruned: ProbeResult,
    protected: ProbeResult,
    baseline: ProbeResult,
}

fn run_pipeline(cfg: &RunConfig) -> Result<()> {
    let generate_data = cfg.paths.activations.is_none() && cfg.synth.is_some();
    // Generated manifests carry these columns; the echoed config is left as given.
    let mut report_labels = (cfg.ssl_label.clone(), cfg.ive_label.clone());
    if generate_data {
        report_labels.0.get_or_insert_with(|| PHONE_LABEL.to_string());
        report_labels.1.get_or_insert_with(|| SPEAKER_LABEL.to_string());
    }
    let out = cfg.out_dir();
    let synth = if generate_data {
        Some(stage_synth(cfg, &out)?)
    } else {
        None
    };
    let data_dir = out.join("data");
    let input = |configured: &Option<PathBuf>, generated: &str, name: &str| -> Result<PathBuf> {
        match configured {
            Some(p) => Ok(cfg.resolve(p)),
            None if synth.is_some() => Ok(data_dir.join(generated)),
            None => Err(Error::Config(format!("no {name} path given (flag or [paths] {name})"))),
        }
    };
    let acts = input(&cfg.paths.activations, "activations", "activations")?;
    let manifest_path = input(&cfg.paths.manifest, "manifest.jsonl", "manifest")?;
    let ssl_path = input(&cfg.paths.ssl_features, "ssl_features.npy", "ssl_features")?;
    let weights_path = input(&cfg.paths.weights, "ffn", "weights")?;
    if !acts.exists() {
        return Err(Error::NotFound(acts));
    }

    let store = load_activations(&acts, &manifest_path)?;
    let manifest = store.manifest().clone();
    let ssl_features = FeatureMatrix::load(&ssl_path)?;
    let ivectors = match &cfg.paths.ivectors {
        Some(p) => FeatureMatrix::load(&cfg.resolve(p))?,
        None => manifest.load_embeddings()?,
    };
    let weights = FfnWeights::load(&weights_path)?;

    let patterns = stage_binarize(cfg, &store, &out)?;
    let (ssl_model, ive_model, labels) = stage_kmeans(cfg, &ssl_features, &ivectors, &manifest, &out)?;
    let id = stage_identify(cfg, &patterns, &labels, &out)?;
    let (protected_mask, baseline_mask) = stage_prune(cfg, &weights, &id.protected, &out)?;
    let prov = Provenance {
        k_ssl: Some(labels.k_ssl),
        k_ive: Some(labels.k_ive),
        ..provenance(cfg, "identify")
    };
    stage_report(
        cfg,
        &identify_outputs(&id, &prov),
        Some((&ssl_model, &ive_model, &manifest)),
        &report_labels,
        &out,
    )?;

    if let Some(data) = synth {
        let truth = |f: Family| data.truth(f).cloned().expect("generator emits P sets");
        let p_ssl = SetScore::compare(&id.p_ssl, &truth(Family::PSsl));
        let p_ive = SetScore::compare(&id.p_ive, &truth(Family::PIve));
        let all = p_ssl.merge(p_ive);
        let label = report_labels.1.clone().unwrap_or_else(|| SPEAKER_LABEL.into());
        let classes = manifest.utterance_labels(&label)?;
        let probe = ProbeReport {
            unpruned: centroid_probe(&store, None, &classes, cfg.seed)?,
            protected: centroid_probe(&store, Some(&protected_mask), &classes, cfg.seed)?,
            baseline: centroid_probe(&store, Some(&baseline_mask), &classes, cfg.seed)?,
            label,
        };
        let dir = out.join("eval");
        write_echoed(
            cfg,
            &dir.join("recovery.json"),
            &Recovery {
                p_ssl,
                p_ive,
                recall: all.recall(),
                precision: all.precision(),
            },
        )?;
        write_echoed(cfg, &dir.join("probe.json"), &probe)?;
    }
    Ok(())
}
