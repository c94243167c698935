//! Session operations shared by the CLI and the HTTP handlers. Each
//! state-advancing operation takes the current snapshot, writes its
//! artifacts, and returns the next snapshot.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use fusionforge_core::analysis::{self, Clustering, Heatmap, TransitionFlows, TransitionOptions};
use fusionforge_core::fusion::{combine, combine_refs, dial_weights};
use fusionforge_core::mapping::{self, DimensionMode, FeatureEnergies, MappedSample, MappingProgress};
use fusionforge_core::metrics::{self, BenchmarkReport, SweepRow};
use fusionforge_core::projection::project_all;
use fusionforge_core::sampling::{random_sample, unified_sample};
use fusionforge_core::{rng, Dataset, DialState, DistanceMatrix, Embedding, MappingOptions, Rows, WeightVector};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};
use crate::store::{
    Descriptor, MappingInfo, SampleInfo, Sampler, SessionDir, SessionState, Snapshot, DISPLAY_DIR, DISPLAY_M,
};

const DISPLAY_STREAM: u64 = 0xD15F_1A7;

/// Progress sink and cancellation flag for long operations.
pub trait Monitor: Sync {
    fn progress(&self, fraction: f64);
    fn cancelled(&self) -> bool;
}

pub struct Silent;

impl Monitor for Silent {
    fn progress(&self, _: f64) {}
    fn cancelled(&self) -> bool {
        false
    }
}

fn check_cancel(monitor: &dyn Monitor) -> ServiceResult<()> {
    if monitor.cancelled() {
        Err(fusionforge_core::Error::Cancelled.into())
    } else {
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> ServiceResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| ServiceError::Core(fusionforge_core::Error::Io { path: path.into(), source: e }))
}

/// Create a session directory from a dataset. Rows are unit-normalized here,
/// before any sampling.
pub fn ingest(dir: &SessionDir, id: &str, dataset: &Dataset) -> ServiceResult<Snapshot> {
    if dir.exists() {
        return Err(ServiceError::bad(format!("session already exists at {}", dir.root().display())));
    }
    dir.create()?;
    let mut descriptor = Descriptor {
        id: id.to_string(),
        name: dataset.name.clone(),
        state: SessionState::Created,
        n: dataset.n(),
        features: dataset.feature_names(),
        has_labels: dataset.labels.is_some(),
        has_thumbnails: dataset.thumbnails.is_some(),
        sample: None,
        mapping: None,
        propagated_weights: None,
    };
    dir.write_descriptor(&descriptor)?;
    let normalized = dataset.normalized()?;
    dir.write_dataset(&normalized)?;
    descriptor.state = SessionState::Ingested;
    dir.write_descriptor(&descriptor)?;
    Ok(Snapshot {
        descriptor,
        dataset: Some(Arc::new(normalized)),
        sample: None,
        analysis: None,
        display: None,
        full: None,
        fused: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_sampler")]
    pub sampler: Sampler,
    /// Only for the random sampler.
    #[serde(default)]
    pub size: Option<usize>,
}

fn default_sampler() -> Sampler {
    Sampler::Kmeans
}

impl Default for SampleRequest {
    fn default() -> Self {
        Self { seed: 0, sampler: Sampler::Kmeans, size: None }
    }
}

pub fn sample(dir: &SessionDir, snap: &Snapshot, req: &SampleRequest) -> ServiceResult<Snapshot> {
    snap.descriptor.require(SessionState::Ingested)?;
    let ds = snap.dataset()?;
    let s = match req.sampler {
        Sampler::Kmeans => {
            if req.size.is_some() {
                return Err(ServiceError::bad("--size applies to the random sampler only"));
            }
            unified_sample(ds, req.seed)?
        }
        Sampler::Random => {
            let size = req.size.ok_or_else(|| ServiceError::bad("random sampler needs a size"))?;
            random_sample(ds, size, req.seed)?
        }
    };
    dir.write_sample(&s)?;
    let mut descriptor = snap.descriptor.clone();
    descriptor.state = SessionState::Sampled;
    descriptor.sample = Some(SampleInfo { seed: req.seed, sampler: req.sampler, size: s.len() });
    dir.write_descriptor(&descriptor)?;
    Ok(Snapshot {
        descriptor,
        sample: Some(Arc::new(s)),
        ..snap.clone()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRequest {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Fixed target dimension; overrides `m_mode`.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub m_mode: Option<DimensionMode>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    MappingOptions::default().lambda
}

fn default_iterations() -> usize {
    MappingOptions::default().iterations
}

impl Default for MapRequest {
    fn default() -> Self {
        Self {
            lambda: default_lambda(),
            m: None,
            m_mode: None,
            iterations: default_iterations(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub lambda: f64,
    pub m: usize,
    pub iterations: usize,
    pub seed: u64,
    pub energies: Vec<FeatureEnergies>,
}

impl MapReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,lambda,m,stress,alignment\n");
        for e in &self.energies {
            let _ = writeln!(out, "{},{},{},{},{}", e.feature, self.lambda, self.m, e.stress, e.alignment);
        }
        out
    }
}

/// Tracks per-stage iteration counts of parallel mapping runs so the
/// overall fraction never decreases.
struct StageProgress<'a> {
    done: Vec<AtomicUsize>,
    iterations: usize,
    monitor: &'a dyn Monitor,
}

impl StageProgress<'_> {
    fn observe(&self, offset: usize, p: MappingProgress) -> bool {
        self.done[offset + p.stage].fetch_max(p.iteration, Ordering::Relaxed);
        let total: usize = self.done.iter().map(|d| d.load(Ordering::Relaxed)).sum();
        self.monitor
            .progress(total as f64 / (self.done.len() * self.iterations) as f64);
        !self.monitor.cancelled()
    }
}

pub fn map(dir: &SessionDir, snap: &Snapshot, req: &MapRequest, monitor: &dyn Monitor) -> ServiceResult<(Snapshot, MapReport)> {
    snap.descriptor.require(SessionState::Sampled)?;
    let sample = snap.sample()?;
    let mode = match (req.m, req.m_mode) {
        (Some(m), _) => DimensionMode::Fixed(m),
        (None, Some(mode)) => mode,
        (None, None) => DimensionMode::MaxIntrinsic,
    };
    let m = mapping::resolve_dimension(sample, mode)?;
    let opts = MappingOptions {
        lambda: req.lambda,
        iterations: req.iterations,
        m,
        seed: req.seed,
        ..Default::default()
    };
    opts.validate()?;
    let separate_display = m != DISPLAY_M;
    let stages = sample.p() + 1;
    let tracker = StageProgress {
        done: (0..stages * (1 + separate_display as usize)).map(|_| AtomicUsize::new(0)).collect(),
        iterations: opts.iterations,
        monitor,
    };

    let analysis = Arc::new(mapping::map_all_with(sample, &opts, &|p| tracker.observe(0, p))?);
    let display = if separate_display {
        let display_opts = MappingOptions {
            m: DISPLAY_M,
            seed: rng::derive(opts.seed, DISPLAY_STREAM),
            ..opts
        };
        Arc::new(mapping::map_all_with(sample, &display_opts, &|p| tracker.observe(stages, p))?)
    } else {
        analysis.clone()
    };
    check_cancel(monitor)?;

    let features = &snap.descriptor.features;
    dir.write_mapped("", &analysis, features)?;
    if separate_display {
        dir.write_mapped(DISPLAY_DIR, &display, features)?;
    }
    let report = MapReport {
        lambda: opts.lambda,
        m,
        iterations: opts.iterations,
        seed: opts.seed,
        energies: mapping::energies(sample, &analysis)?,
    };
    write_text(&dir.path("map_report.csv"), &report.to_csv())?;

    let mut descriptor = snap.descriptor.clone();
    descriptor.state = SessionState::Mapped;
    descriptor.mapping = Some(MappingInfo {
        lambda: opts.lambda,
        m,
        m_mode: mode,
        iterations: opts.iterations,
        gamma0: opts.gamma0,
        kappa: opts.kappa,
        seed: opts.seed,
        separate_display,
    });
    dir.write_descriptor(&descriptor)?;
    monitor.progress(1.0);
    Ok((
        Snapshot {
            descriptor,
            analysis: Some(analysis),
            display: Some(display),
            ..snap.clone()
        },
        report,
    ))
}

/// A point given either as `[x, y]` or as `{"x": .., "y": ..}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Point {
    Pair([f64; 2]),
    Xy { x: f64, y: f64 },
}

impl Point {
    pub fn xy(self) -> [f64; 2] {
        match self {
            Point::Pair(p) => p,
            Point::Xy { x, y } => [x, y],
        }
    }
}

/// Weights either directly or through the dial widget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightInput {
    Alphas { alphas: Vec<f64> },
    Dial { dial: Point, #[serde(default)] anchors: Option<Vec<Point>> },
}

impl WeightInput {
    pub fn resolve(&self, p: usize) -> ServiceResult<WeightVector> {
        let w = match self {
            WeightInput::Alphas { alphas } => WeightVector::new(alphas.clone())?,
            WeightInput::Dial { dial, anchors } => {
                let state = match anchors {
                    Some(a) => DialState::new(a.iter().map(|p| p.xy()).collect(), dial.xy())?,
                    None => DialState::with_default_anchors(p, dial.xy())?,
                };
                dial_weights(&state)
            }
        };
        if w.len() != p {
            return Err(ServiceError::bad(format!("{} weights for {p} feature sets", w.len())));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub alphas: Vec<f64>,
    pub points: Vec<[f64; 2]>,
}

/// Fuse the m = 2 display layouts. Reads only the snapshot.
pub fn evaluate(snap: &Snapshot, input: &WeightInput) -> ServiceResult<Evaluation> {
    snap.descriptor.require_at_least(SessionState::Mapped)?;
    let display = snap.display()?;
    let w = input.resolve(display.aligned.len())?;
    let refs: Vec<&Embedding> = display.aligned.iter().collect();
    let fused = combine_refs(&refs, &w)?;
    let points = fused.coords().chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok(Evaluation { alphas: w.alphas().to_vec(), points })
}

pub fn propagate(dir: &SessionDir, snap: &Snapshot, w: &WeightVector, monitor: &dyn Monitor) -> ServiceResult<Snapshot> {
    snap.descriptor.require(SessionState::Mapped)?;
    let ds = snap.dataset()?;
    let sample = snap.sample()?;
    let analysis = snap.analysis()?;
    if w.len() != ds.p() {
        return Err(ServiceError::bad(format!("{} weights for {} feature sets", w.len(), ds.p())));
    }
    let mut full = Vec::with_capacity(ds.p());
    for (i, ((f, s), r)) in ds.feature_sets.iter().zip(&sample.per_feature_samples).zip(&analysis.aligned).enumerate() {
        check_cancel(monitor)?;
        full.push(project_all(f, s, r)?);
        monitor.progress((i + 1) as f64 / (ds.p() + 1) as f64);
    }
    check_cancel(monitor)?;
    let mut fused = combine(&full, w)?;
    fused.source = "fused".into();
    for (name, v) in snap.descriptor.features.iter().zip(&full) {
        dir.write_embedding(format!("V_{name}.fmat"), v)?;
    }
    dir.write_embedding("fused.fmat", &fused)?;
    let mut descriptor = snap.descriptor.clone();
    descriptor.state = SessionState::Propagated;
    descriptor.propagated_weights = Some(w.alphas().to_vec());
    dir.write_descriptor(&descriptor)?;
    monitor.progress(1.0);
    Ok(Snapshot {
        descriptor,
        full: Some(Arc::new(full)),
        fused: Some(Arc::new(fused)),
        ..snap.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    #[default]
    Sample,
    Full,
}

/// Analysis-space embeddings of every feature set for `on`.
pub fn views(snap: &Snapshot, on: Target) -> ServiceResult<&[Embedding]> {
    match on {
        Target::Sample => Ok(&snap.analysis()?.aligned),
        Target::Full => Ok(snap.full()?.as_slice()),
    }
}

pub fn fuse(snap: &Snapshot, w: &WeightVector, on: Target) -> ServiceResult<Embedding> {
    let v = views(snap, on)?;
    if w.len() != v.len() {
        return Err(ServiceError::bad(format!("{} weights for {} feature sets", w.len(), v.len())));
    }
    let mut fused = combine(v, w)?;
    fused.source = "fused".into();
    Ok(fused)
}

/// Default weights for analysis requests: the propagated weights if any,
/// otherwise uniform.
pub fn default_weights(snap: &Snapshot) -> WeightVector {
    snap.descriptor
        .propagated_weights
        .clone()
        .and_then(|a| WeightVector::new(a).ok())
        .unwrap_or_else(|| WeightVector::uniform(snap.descriptor.features.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRequest {
    #[serde(flatten)]
    pub weights: Option<WeightInput>,
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default)]
    pub on: Target,
    #[serde(default)]
    pub seed: u64,
}

fn default_quantile() -> f64 {
    analysis::DEFAULT_QUANTILE
}

pub fn cluster(snap: &Snapshot, req: &ClusterRequest) -> ServiceResult<Clustering> {
    let p = snap.descriptor.features.len();
    let w = match &req.weights {
        Some(input) => input.resolve(p)?,
        None => default_weights(snap),
    };
    snap.descriptor.require_at_least(SessionState::Mapped)?;
    Ok(analysis::cluster_fused(views(snap, req.on)?, &w, req.bandwidth, req.quantile, req.seed)?)
}

pub fn write_clustering(dir: &SessionDir, c: &Clustering, name: &str) -> ServiceResult<()> {
    let mut text = String::new();
    for l in &c.labels {
        let _ = writeln!(text, "{l}");
    }
    write_text(&dir.path(name), &text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRequest {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default = "default_full")]
    pub on: Target,
    #[serde(default)]
    pub bandwidth: Option<f64>,
    #[serde(default = "default_quantile")]
    pub quantile: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    TransitionOptions::default().steps
}

fn default_threshold() -> f64 {
    TransitionOptions::default().threshold
}

fn default_full() -> Target {
    Target::Full
}

pub fn transitions(snap: &Snapshot, req: &TransitionRequest) -> ServiceResult<TransitionFlows> {
    snap.descriptor.require_at_least(SessionState::Mapped)?;
    let from = WeightVector::new(req.from.clone())?;
    let to = WeightVector::new(req.to.clone())?;
    let opts = TransitionOptions {
        steps: req.steps,
        threshold: req.threshold,
        quantile: req.quantile,
        bandwidth: req.bandwidth,
        seed: req.seed,
    };
    Ok(analysis::transition_analysis(views(snap, req.on)?, &from, &to, &opts)?)
}

pub fn write_transitions(dir: &SessionDir, t: &TransitionFlows) -> ServiceResult<()> {
    write_text(&dir.path("flows.csv"), &t.to_csv())?;
    let mut text = String::from("step");
    for i in 0..t.steps.first().map_or(0, |c| c.labels.len()) {
        let _ = write!(text, ",{i}");
    }
    text.push('\n');
    for (s, c) in t.steps.iter().enumerate() {
        let _ = write!(text, "{s}");
        for l in &c.labels {
            let _ = write!(text, ",{l}");
        }
        text.push('\n');
    }
    write_text(&dir.path("transition_labels.csv"), &text)
}

pub fn heatmap(snap: &Snapshot, w: &WeightVector, on: Target, size: usize) -> ServiceResult<Heatmap> {
    snap.descriptor.require_at_least(SessionState::Mapped)?;
    let fused = fuse(snap, w, on)?;
    Ok(analysis::heatmap(&DistanceMatrix::from_rows(&fused), size))
}

pub fn write_heatmap(dir: &SessionDir, h: &Heatmap) -> ServiceResult<()> {
    let mut order = String::new();
    for i in &h.order {
        let _ = writeln!(order, "{i}");
    }
    write_text(&dir.path("order.idx"), &order)?;
    let mut grid = String::new();
    for row in &h.grid {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(grid, "{}", cells.join(","));
    }
    write_text(&dir.path("heatmap.csv"), &grid)
}

fn mapping_options(snap: &Snapshot) -> ServiceResult<MappingOptions> {
    if let Some(info) = &snap.descriptor.mapping {
        return Ok(MappingOptions {
            lambda: info.lambda,
            iterations: info.iterations,
            gamma0: info.gamma0,
            kappa: info.kappa,
            m: info.m,
            seed: info.seed,
        });
    }
    let m = mapping::resolve_dimension(snap.sample()?, DimensionMode::MaxIntrinsic)?;
    Ok(MappingOptions { m, ..Default::default() })
}

pub fn bench_sweep(snap: &Snapshot, grid: &[f64], repeats: usize, seed: u64) -> ServiceResult<Vec<SweepRow>> {
    snap.descriptor.require_at_least(SessionState::Sampled)?;
    let base = mapping_options(snap)?;
    Ok(metrics::lambda_sweep(snap.sample()?, &base, grid, repeats, seed)?)
}

pub fn bench_nnm(snap: &Snapshot, draws: usize, seed: u64) -> ServiceResult<BenchmarkReport> {
    snap.descriptor.require_at_least(SessionState::Mapped)?;
    let ds = snap.dataset()?;
    let sample = snap.sample()?;
    let analysis: &MappedSample = snap.analysis()?;
    let computed;
    let full: &[Embedding] = match &snap.full {
        Some(f) => f,
        None => {
            computed = metrics::project_dataset(ds, sample, analysis)?;
            &computed
        }
    };
    Ok(metrics::fusion_benchmark(ds, sample, analysis, full, draws, seed)?)
}

/// Display coordinates plus ids for the sample layouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEmbeddings {
    pub ids: Vec<String>,
    pub indices: Vec<usize>,
    pub labels: Option<Vec<String>>,
    pub thumbnails: Option<Vec<String>>,
    pub m: usize,
    pub reference: Vec<Vec<f64>>,
    pub features: Vec<NamedPoints>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedPoints {
    pub name: String,
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum View {
    #[default]
    Display,
    Analysis,
}

fn rows_of(e: &Embedding) -> Vec<Vec<f64>> {
    (0..e.rows()).map(|i| e.row(i).to_vec()).collect()
}

pub fn sample_embeddings(snap: &Snapshot, view: View) -> ServiceResult<SampleEmbeddings> {
    snap.descriptor.require_at_least(SessionState::Mapped)?;
    let ds = snap.dataset()?;
    let sample = snap.sample()?;
    let mapped = match view {
        View::Display => snap.display()?,
        View::Analysis => snap.analysis()?,
    };
    let pick = |list: &Option<Vec<String>>| list.as_ref().map(|l| sample.indices.iter().map(|&i| l[i].clone()).collect());
    Ok(SampleEmbeddings {
        ids: sample.indices.iter().map(|&i| ds.item_ids[i].clone()).collect(),
        indices: sample.indices.clone(),
        labels: pick(&ds.labels),
        thumbnails: pick(&ds.thumbnails),
        m: mapped.m(),
        reference: rows_of(&mapped.reference),
        features: mapped
            .aligned
            .iter()
            .map(|e| NamedPoints { name: e.source.clone(), points: rows_of(e) })
            .collect(),
    })
}
