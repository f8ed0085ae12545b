use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{BlobSpec, CorruptionKind, CorruptionSpec};
use crate::error::{Error, Result};
use crate::model::{InitScheme, TrainConfig};
use crate::solver::SolverConfig;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

/// A pair of IDX files. Relative paths resolve against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource<'a> {
    Idx(&'a IdxFiles),
    Blobs(&'a BlobSpec),
}

/// Exactly one of `idx` and `blobs` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub validation_size: usize,
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobSpec>,
}

impl DatasetConfig {
    pub fn source(&self) -> Result<DatasetSource<'_>> {
        match (&self.idx, &self.blobs) {
            (Some(f), None) => Ok(DatasetSource::Idx(f)),
            (None, Some(b)) => Ok(DatasetSource::Blobs(b)),
            _ => Err(Error::Manifest("dataset needs exactly one of [dataset.idx] and [dataset.blobs]".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    pub kind: CorruptionKind,
    #[serde(default)]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides `train.max_epochs` for models of this variant.
    #[serde(default)]
    pub max_epochs: Option<usize>,
}

impl Variant {
    pub fn corruption(&self) -> CorruptionSpec {
        CorruptionSpec {
            kind: self.kind,
            fraction: self.fraction,
            seed: self.seed,
        }
    }
}

fn is_default_init(s: &InitScheme) -> bool {
    *s == InitScheme::default()
}

fn default_bins() -> usize {
    60
}
fn default_neighbors() -> usize {
    16
}
fn default_block() -> usize {
    8
}
fn default_retries() -> usize {
    2
}
fn default_matrix() -> usize {
    1000
}
fn default_budget() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    /// Seed of the margin sample selection.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub capacities: Vec<usize>,
    /// Model seeds; each (variant, capacity, seed) is one cell.
    pub seeds: Vec<u64>,
    #[serde(default = "default_budget")]
    pub sample_budget: usize,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Nearest different-label candidates kept per selected sample.
    #[serde(default = "default_neighbors")]
    pub neighbor_candidates: usize,
    /// Samples per margin job.
    #[serde(default = "default_block")]
    pub margin_block: usize,
    #[serde(default = "default_retries")]
    pub max_job_retries: usize,
    /// Samples per side of the distance matrix.
    #[serde(default = "default_matrix")]
    pub distance_matrix_size: usize,
    pub dataset: DatasetConfig,
    pub variants: Vec<Variant>,
    /// Omitted from the canonical form at its default, so manifests
    /// written before the field existed keep their hash.
    #[serde(default, skip_serializing_if = "is_default_init")]
    pub init_scheme: InitScheme,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    /// Directory the manifest was read from; not part of the hashed content.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunManifest {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut m: RunManifest = toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        m.base_dir = base_dir.to_path_buf();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Hex sha256 of the canonical serialization, after overrides. The
    /// output directory is a location, not content, and is left out.
    pub fn hash(&self) -> String {
        let content = RunManifest {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let digest = Sha256::digest(content.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn train_config(&self, variant: &Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: variant.max_epochs.unwrap_or(self.train.max_epochs),
            seed,
            ..self.train.clone()
        }
    }

    pub fn variant(&self, name: &str) -> Option<&Variant> {
        self.variants.iter().find(|v| v.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Manifest(m));
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return bad(format!(
                "format_version {} is not supported (expected {MANIFEST_FORMAT_VERSION})",
                self.format_version
            ));
        }
        if self.capacities.is_empty() || self.capacities.contains(&0) {
            return bad("capacities must be a non-empty list of positive widths".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.variants.is_empty() {
            return bad("at least one variant is required".into());
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("variant names must be unique".into());
        }
        for v in &self.variants {
            if v.name.is_empty() || !v.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(format!("variant name {:?} must be non-empty [A-Za-z0-9_-]", v.name));
            }
            v.corruption().validate().map_err(|e| Error::Manifest(format!("variant {}: {e}", v.name)))?;
        }
        if self.sample_budget == 0 || self.margin_block == 0 || self.histogram_bins == 0 {
            return bad("sample_budget, margin_block and histogram_bins must be positive".into());
        }
        if self.neighbor_candidates == 0 {
            return bad("neighbor_candidates must be positive".into());
        }
        self.train.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        self.solver.validate().map_err(|e| Error::Manifest(e.to_string()))?;
        match self.dataset.source()? {
            DatasetSource::Idx(IdxFiles { images, labels }) => {
                for p in [images, labels] {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return bad(format!("dataset file {} does not exist", full.display()));
                    }
                }
            }
            DatasetSource::Blobs(spec) => {
                if self.dataset.validation_size >= spec.samples {
                    return bad("validation_size must be smaller than the blob sample count".into());
                }
                if self.sample_budget > spec.samples - self.dataset.validation_size {
                    return bad(format!(
                        "sample_budget {} exceeds the training split size {}",
                        self.sample_budget,
                        spec.samples - self.dataset.validation_size
                    ));
                }
            }
        }
        Ok(())
    }
}
