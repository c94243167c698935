//! On-disk session layout shared by the CLI and the HTTP service.
//!
//! ```text
//! <session>/
//!   session.json            descriptor (state, options, feature names)
//!   items.txt labels.txt thumbnails.txt
//!   features/<f>.fmat       normalized feature sets
//!   sample.idx  S_<f>.fmat
//!   reference.fmat  R_<f>.fmat  map_report.csv
//!   display/reference.fmat  display/R_<f>.fmat     (m = 2 steering layout)
//!   V_<f>.fmat  fused.fmat
//!   clusters.txt  flows.csv  order.idx  heatmap.csv
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fusionforge_core::ingest::{read_lines, read_matrix, write_lines, write_matrix};
use fusionforge_core::mapping::{DimensionMode, MappedSample};
use fusionforge_core::{Dataset, Embedding, FeatureMatrix, SampleSet};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub const DESCRIPTOR: &str = "session.json";
pub const DISPLAY_DIR: &str = "display";
pub const DISPLAY_M: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Created,
    Ingested,
    Sampled,
    Mapped,
    Propagated,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SessionState::Created => "CREATED",
            SessionState::Ingested => "INGESTED",
            SessionState::Sampled => "SAMPLED",
            SessionState::Mapped => "MAPPED",
            SessionState::Propagated => "PROPAGATED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Kmeans,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub seed: u64,
    pub sampler: Sampler,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingInfo {
    pub lambda: f64,
    pub m: usize,
    pub m_mode: DimensionMode,
    pub iterations: usize,
    pub gamma0: f64,
    pub kappa: f64,
    pub seed: u64,
    /// `true` when the display layout is a separate m = 2 run.
    pub separate_display: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub id: String,
    pub name: String,
    pub state: SessionState,
    pub n: usize,
    pub features: Vec<String>,
    pub has_labels: bool,
    pub has_thumbnails: bool,
    #[serde(default)]
    pub sample: Option<SampleInfo>,
    #[serde(default)]
    pub mapping: Option<MappingInfo>,
    #[serde(default)]
    pub propagated_weights: Option<Vec<f64>>,
}

impl Descriptor {
    pub fn require(&self, state: SessionState) -> ServiceResult<()> {
        if self.state == state {
            Ok(())
        } else {
            Err(ServiceError::State {
                expected: state.to_string(),
                found: self.state,
            })
        }
    }

    pub fn require_at_least(&self, state: SessionState) -> ServiceResult<()> {
        if self.state >= state {
            Ok(())
        } else {
            Err(ServiceError::State {
                expected: format!("{state} or later"),
                found: self.state,
            })
        }
    }
}

/// Everything loaded for one session. Completed artifacts never change, so a
/// snapshot can be shared freely between readers.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub descriptor: Descriptor,
    pub dataset: Option<Arc<Dataset>>,
    pub sample: Option<Arc<SampleSet>>,
    pub analysis: Option<Arc<MappedSample>>,
    pub display: Option<Arc<MappedSample>>,
    pub full: Option<Arc<Vec<Embedding>>>,
    pub fused: Option<Arc<Embedding>>,
}

impl Snapshot {
    pub fn dataset(&self) -> ServiceResult<&Arc<Dataset>> {
        self.dataset.as_ref().ok_or_else(|| self.missing(SessionState::Ingested))
    }

    pub fn sample(&self) -> ServiceResult<&Arc<SampleSet>> {
        self.sample.as_ref().ok_or_else(|| self.missing(SessionState::Sampled))
    }

    pub fn analysis(&self) -> ServiceResult<&Arc<MappedSample>> {
        self.analysis.as_ref().ok_or_else(|| self.missing(SessionState::Mapped))
    }

    pub fn display(&self) -> ServiceResult<&Arc<MappedSample>> {
        self.display.as_ref().ok_or_else(|| self.missing(SessionState::Mapped))
    }

    pub fn full(&self) -> ServiceResult<&Arc<Vec<Embedding>>> {
        self.full.as_ref().ok_or_else(|| self.missing(SessionState::Propagated))
    }

    fn missing(&self, state: SessionState) -> ServiceError {
        ServiceError::State {
            expected: format!("{state} or later"),
            found: self.descriptor.state,
        }
    }
}

/// A session directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionDir {
    root: PathBuf,
}

fn io_err(path: &Path, e: std::io::Error) -> ServiceError {
    ServiceError::Core(fusionforge_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

impl SessionDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self) -> bool {
        self.path(DESCRIPTOR).is_file()
    }

    pub fn create(&self) -> ServiceResult<()> {
        for d in [self.root.clone(), self.path("features"), self.path(DISPLAY_DIR)] {
            fs::create_dir_all(&d).map_err(|e| io_err(&d, e))?;
        }
        Ok(())
    }

    pub fn read_descriptor(&self) -> ServiceResult<Descriptor> {
        let path = self.path(DESCRIPTOR);
        if !path.is_file() {
            return Err(ServiceError::NotFound(format!("no session at {}", self.root.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| ServiceError::Corrupt(format!("{}: {e}", path.display())))
    }

    /// Written last, through a rename, so a crash never leaves a descriptor
    /// pointing at missing artifacts.
    pub fn write_descriptor(&self, d: &Descriptor) -> ServiceResult<()> {
        let path = self.path(DESCRIPTOR);
        let tmp = self.path("session.json.tmp");
        let text = serde_json::to_string_pretty(d).expect("descriptor serializes");
        fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))
    }

    pub fn write_embedding(&self, rel: impl AsRef<Path>, e: &Embedding) -> ServiceResult<()> {
        Ok(write_matrix(&e.to_feature_matrix(), self.path(rel))?)
    }

    pub fn read_embedding(&self, rel: impl AsRef<Path>, source: &str) -> ServiceResult<Embedding> {
        let f = read_matrix(self.path(rel))?.with_name(source);
        Ok(Embedding::from_feature_matrix(&f)?)
    }

    pub fn feature_path(name: &str) -> PathBuf {
        Path::new("features").join(format!("{name}.fmat"))
    }

    fn mapped_paths(prefix: &str, features: &[String]) -> (PathBuf, Vec<PathBuf>) {
        let base = Path::new(prefix);
        (
            base.join("reference.fmat"),
            features.iter().map(|f| base.join(format!("R_{f}.fmat"))).collect(),
        )
    }

    pub fn write_mapped(&self, prefix: &str, mapped: &MappedSample, features: &[String]) -> ServiceResult<()> {
        let (r, rs) = Self::mapped_paths(prefix, features);
        self.write_embedding(r, &mapped.reference)?;
        for (p, e) in rs.iter().zip(&mapped.aligned) {
            self.write_embedding(p, e)?;
        }
        Ok(())
    }

    fn read_mapped(&self, prefix: &str, features: &[String], info: &MappingInfo) -> ServiceResult<MappedSample> {
        let (r, rs) = Self::mapped_paths(prefix, features);
        let tag = |mut e: Embedding, lambda: f64| {
            e.lambda_used = lambda;
            e.seed = info.seed;
            e
        };
        Ok(MappedSample {
            reference: tag(self.read_embedding(r, "reference")?, 1.0),
            aligned: rs
                .iter()
                .zip(features)
                .map(|(p, f)| Ok(tag(self.read_embedding(p, f)?, info.lambda)))
                .collect::<ServiceResult<_>>()?,
        })
    }

    pub fn write_dataset(&self, ds: &Dataset) -> ServiceResult<()> {
        write_lines(&self.path("items.txt"), &ds.item_ids)?;
        if let Some(l) = &ds.labels {
            write_lines(&self.path("labels.txt"), l)?;
        }
        if let Some(t) = &ds.thumbnails {
            write_lines(&self.path("thumbnails.txt"), t)?;
        }
        for f in &ds.feature_sets {
            write_matrix(f, self.path(Self::feature_path(&f.name)))?;
        }
        Ok(())
    }

    fn read_dataset(&self, d: &Descriptor) -> ServiceResult<Dataset> {
        let items = read_lines(&self.path("items.txt"))?;
        let labels = d.has_labels.then(|| read_lines(&self.path("labels.txt"))).transpose()?;
        let thumbs = d.has_thumbnails.then(|| read_lines(&self.path("thumbnails.txt"))).transpose()?;
        let features = d
            .features
            .iter()
            .map(|f| Ok(read_matrix(self.path(Self::feature_path(f)))?.with_name(f.clone()).detect_normalized()))
            .collect::<ServiceResult<Vec<FeatureMatrix>>>()?;
        Ok(Dataset::new(d.name.clone(), items, features, labels, thumbs)?)
    }

    pub fn write_sample(&self, s: &SampleSet) -> ServiceResult<()> {
        write_lines(&self.path("sample.idx"), &s.indices)?;
        for f in &s.per_feature_samples {
            write_matrix(f, self.path(format!("S_{}.fmat", f.name)))?;
        }
        Ok(())
    }

    fn read_sample(&self, ds: &Dataset, info: &SampleInfo) -> ServiceResult<SampleSet> {
        let indices = read_lines(&self.path("sample.idx"))?
            .iter()
            .map(|l| {
                l.trim()
                    .parse::<usize>()
                    .map_err(|e| ServiceError::Corrupt(format!("sample.idx: {e}")))
            })
            .collect::<ServiceResult<Vec<_>>>()?;
        Ok(SampleSet::from_indices(ds, indices, info.seed)?)
    }

    /// Load the descriptor and every artifact its state promises.
    pub fn load(&self) -> ServiceResult<Snapshot> {
        let descriptor = self.read_descriptor()?;
        let mut snap = Snapshot {
            descriptor: descriptor.clone(),
            dataset: None,
            sample: None,
            analysis: None,
            display: None,
            full: None,
            fused: None,
        };
        if descriptor.state < SessionState::Ingested {
            return Ok(snap);
        }
        let ds = Arc::new(self.read_dataset(&descriptor)?);
        snap.dataset = Some(ds.clone());
        if let Some(info) = descriptor.sample.as_ref().filter(|_| descriptor.state >= SessionState::Sampled) {
            snap.sample = Some(Arc::new(self.read_sample(&ds, info)?));
        }
        if let Some(info) = descriptor.mapping.as_ref().filter(|_| descriptor.state >= SessionState::Mapped) {
            let analysis = Arc::new(self.read_mapped("", &descriptor.features, info)?);
            snap.display = Some(if info.separate_display {
                Arc::new(self.read_mapped(DISPLAY_DIR, &descriptor.features, info)?)
            } else {
                analysis.clone()
            });
            snap.analysis = Some(analysis);
        }
        if descriptor.state >= SessionState::Propagated {
            let full = descriptor
                .features
                .iter()
                .map(|f| self.read_embedding(format!("V_{f}.fmat"), f))
                .collect::<ServiceResult<Vec<_>>>()?;
            snap.full = Some(Arc::new(full));
            snap.fused = Some(Arc::new(self.read_embedding("fused.fmat", "fused")?));
        }
        Ok(snap)
    }
}
