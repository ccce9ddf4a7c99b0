//! Declarative config documents: the dataset manifest and the training
//! document, both TOML, plus dotted-key overrides.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ClassMapping;
use crate::model::ModelConfig;
use crate::raster::TileIndex;
use crate::sits::{NormStats, Period};
use crate::synth::{CorruptionConfig, WorldConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub date: NaiveDate,
    pub path: PathBuf,
}

/// Cloud flags packed in a quality band: a pixel is cloudy when any listed
/// bit is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRule {
    pub band: String,
    pub cloud_bits: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductEntry {
    #[serde(flatten)]
    pub mapping: ClassMapping,
    /// One class raster, or several dates reduced by their per-pixel mode.
    pub paths: Vec<PathBuf>,
}

/// A pixel window of the scene grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn contains(&self, t: &TileIndex) -> bool {
        t.row0 >= self.row0
            && t.col0 >= self.col0
            && t.row0 + t.rows <= self.row0 + self.rows
            && t.col0 + t.cols <= self.col0 + self.cols
    }
}

/// Frame drops and cloud blobs applied to the training cube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingCorruption {
    pub spatial_rate: f64,
    pub temporal_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_cloud() -> f64 {
    1.0
}
fn default_patch() -> usize {
    256
}
fn default_stride() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    /// Spectral bands read from every scene, in model channel order.
    pub bands: Vec<String>,
    #[serde(default)]
    pub qa: Option<QaRule>,
    /// Scenes cloudier than this are discarded before compositing.
    #[serde(default = "default_max_cloud")]
    pub max_cloud: f64,
    #[serde(default)]
    pub period: Period,
    pub scenes: Vec<SceneEntry>,
    pub products: Vec<ProductEntry>,
    /// Binary reference map {0, 1, 255} for evaluation.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Elevation in metres, for slope-stratified reports.
    #[serde(default)]
    pub dem: Option<PathBuf>,
    /// Fixed normalization statistics; computed from the training patches
    /// when absent.
    #[serde(default)]
    pub norm: Option<NormStats>,
    #[serde(default = "default_patch")]
    pub patch_size: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Stride of the inference windows; defaults to `stride`.
    #[serde(default)]
    pub map_stride: Option<usize>,
    #[serde(default)]
    pub train_region: Option<Region>,
    #[serde(default)]
    pub validation_region: Option<Region>,
    #[serde(default)]
    pub train_corruption: Option<TrainingCorruption>,
    /// Directory the relative paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() { p.to_path_buf() } else { self.root.join(p) }
    }

    pub fn map_stride(&self) -> usize {
        self.map_stride.unwrap_or(self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("manifest {:?}: {m}", self.name)));
        if self.bands.is_empty() {
            return bad("no bands listed".into());
        }
        if self.scenes.is_empty() {
            return bad("no scenes listed".into());
        }
        if self.products.len() < 2 {
            return bad(format!("{} products listed, at least 2 needed", self.products.len()));
        }
        for p in &self.products {
            p.mapping.validate()?;
            if p.paths.is_empty() {
                return bad(format!("product {} has no rasters", p.mapping.product_id));
            }
        }
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size || self.map_stride() == 0 {
            return bad(format!("patch size {} / stride {} invalid", self.patch_size, self.stride));
        }
        if self.map_stride() > self.patch_size {
            return bad("map stride exceeds the patch size".into());
        }
        if !(0.0..=1.0).contains(&self.max_cloud) {
            return bad(format!("max_cloud {} outside [0, 1]", self.max_cloud));
        }
        if let Some(n) = &self.norm {
            if n.mean.len() != self.bands.len() || n.std.len() != self.bands.len() {
                return bad("normalization statistics do not match the band list".into());
            }
        }
        Ok(())
    }
}

/// Model and schedule for `train` / `continue`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainDocument {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Parses a TOML document after applying `key.path=value` overrides.
/// Values are read as TOML literals, falling back to plain strings.
pub fn load_document<T: serde::de::DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = match path {
        Some(p) => {
            let text = read_text(p)?;
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            if table.is_empty() {
                return Err(Error::Config(format!("{} is empty", p.display())));
            }
            table
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    T::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))
}

pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("override key {key:?} is malformed")));
        }
        let value = parse_literal(raw.trim());
        let mut node = &mut *table;
        for p in &parts[..parts.len() - 1] {
            let entry = node.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// World generator settings for `synth` and `pipeline`.
pub type WorldDocument = WorldConfig;

/// Rate grid for `robustness`.
pub type CorruptionDocument = CorruptionConfig;
