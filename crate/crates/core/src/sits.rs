//! Satellite image time series: cloud filtering, gap filling, periodic
//! compositing and patch extraction.

use std::cmp::Ordering;

use chrono::{Datelike, NaiveDate};
use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusedLabels, QualityMask, IGNORE};
use crate::raster::TileIndex;

/// One acquisition. `bands` is H×W×C surface reflectance; `cloud_mask` is
/// true where the pixel is cloudy (or otherwise unusable).
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub timestamp: NaiveDate,
    pub bands: Array3<f64>,
    pub cloud_mask: Array2<bool>,
    pub cloud_fraction: f64,
}

impl SceneRecord {
    pub fn new(timestamp: NaiveDate, bands: Array3<f64>, cloud_mask: Array2<bool>) -> Result<Self> {
        let (h, w, _) = bands.dim();
        if cloud_mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "cloud mask {:?} does not match scene {}x{}",
                cloud_mask.dim(),
                h,
                w
            )));
        }
        let cloud_fraction = fraction(&cloud_mask);
        Ok(Self { timestamp, bands, cloud_mask, cloud_fraction })
    }

    /// Clear and finite in every band.
    pub fn is_clear(&self, r: usize, c: usize) -> bool {
        !self.cloud_mask[[r, c]] && self.bands.slice(s![r, c, ..]).iter().all(|v| v.is_finite())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.bands.dim()
    }
}

fn fraction(mask: &Array2<bool>) -> f64 {
    if mask.is_empty() {
        0.0
    } else {
        mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64
    }
}

/// Decodes a bit-packed QA band: a pixel is cloudy when any of `bits` is set.
pub fn cloud_mask_from_qa(qa: &Array2<f64>, bits: &[u32]) -> Array2<bool> {
    let flag = bits.iter().fold(0u64, |acc, &b| acc | (1u64 << b));
    qa.mapv(|v| !v.is_finite() || (v as u64) & flag != 0)
}

pub fn filter_scenes(scenes: Vec<SceneRecord>, max_cloud: f64) -> Vec<SceneRecord> {
    scenes.into_iter().filter(|s| s.cloud_fraction <= max_cloud).collect()
}

/// Replaces every cloudy pixel of `target` with the value from the first
/// scene in `neighbors` that is clear there. The caller orders `neighbors`
/// by distance in time. Pixels clear nowhere become NaN and stay flagged.
pub fn fill_clouds(target: &SceneRecord, neighbors: &[&SceneRecord]) -> Result<SceneRecord> {
    let (h, w, c) = target.dims();
    for n in neighbors {
        if n.dims() != (h, w, c) {
            return Err(Error::Shape(format!(
                "scene {} has shape {:?}, expected {:?}",
                n.timestamp,
                n.dims(),
                (h, w, c)
            )));
        }
    }
    let mut out = target.clone();
    for r in 0..h {
        for col in 0..w {
            if target.is_clear(r, col) {
                continue;
            }
            match neighbors.iter().find(|n| n.is_clear(r, col)) {
                Some(n) => {
                    out.bands.slice_mut(s![r, col, ..]).assign(&n.bands.slice(s![r, col, ..]));
                    out.cloud_mask[[r, col]] = false;
                }
                None => {
                    out.bands.slice_mut(s![r, col, ..]).fill(f64::NAN);
                    out.cloud_mask[[r, col]] = true;
                }
            }
        }
    }
    out.cloud_fraction = fraction(&out.cloud_mask);
    Ok(out)
}

/// Fills every scene from all the others, nearest in time first (earlier
/// wins a tie).
pub fn fill_all(scenes: &[SceneRecord]) -> Result<Vec<SceneRecord>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, target)| {
            let mut others: Vec<&SceneRecord> =
                scenes.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, s)| s).collect();
            others.sort_by_key(|s| ((s.timestamp - target.timestamp).num_days().abs(), s.timestamp));
            fill_clouds(target, &others)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Period {
    #[default]
    Monthly,
    /// Calendar quarters: Jan–Mar, Apr–Jun, Jul–Sep, Oct–Dec.
    Seasonal,
    Annual,
}

impl Period {
    pub fn count(self) -> usize {
        match self {
            Period::Monthly => 12,
            Period::Seasonal => 4,
            Period::Annual => 1,
        }
    }

    /// 1-based period number of a date.
    pub fn of(self, date: NaiveDate) -> u32 {
        match self {
            Period::Monthly => date.month(),
            Period::Seasonal => (date.month() - 1) / 3 + 1,
            Period::Annual => 1,
        }
    }

    /// Month at the middle of the period; used for the positional encoding.
    pub fn position(self, label: u32) -> f64 {
        match self {
            Period::Monthly => label as f64,
            Period::Seasonal => 3.0 * label as f64 - 1.0,
            Period::Annual => 6.5,
        }
    }
}

/// T×C×H×W frames with per-frame validity.
#[derive(Clone, Debug, PartialEq)]
pub struct SitsCube {
    pub frames: Array4<f64>,
    pub period_labels: Vec<u32>,
    /// T×H×W.
    pub validity: Array3<bool>,
}

impl SitsCube {
    pub fn new(frames: Array4<f64>, period_labels: Vec<u32>, validity: Array3<bool>) -> Result<Self> {
        let (t, _, h, w) = frames.dim();
        if t == 0 {
            return Err(Error::Shape("cube has no frames".into()));
        }
        if period_labels.len() != t || validity.dim() != (t, h, w) {
            return Err(Error::Shape(format!(
                "cube of {t} frames {h}x{w} has {} labels and validity {:?}",
                period_labels.len(),
                validity.dim()
            )));
        }
        Ok(Self { frames, period_labels, validity })
    }

    /// (T, C, H, W)
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.frames.dim()
    }

    pub fn window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> SitsCube {
        SitsCube {
            frames: self.frames.slice(s![.., .., row0..row0 + rows, col0..col0 + cols]).to_owned(),
            period_labels: self.period_labels.clone(),
            validity: self.validity.slice(s![.., row0..row0 + rows, col0..col0 + cols]).to_owned(),
        }
    }

    /// Normalized frames with invalid pixels zeroed, ready for the model.
    pub fn model_input(&self, stats: &NormStats) -> Result<Array4<f64>> {
        let (t, c, h, w) = self.dims();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::Shape(format!(
                "normalization statistics have {} channels, cube has {c}",
                stats.mean.len()
            )));
        }
        let mut x = Array4::zeros((t, c, h, w));
        for ti in 0..t {
            for ci in 0..c {
                let (m, sd) = (stats.mean[ci], stats.std[ci]);
                for r in 0..h {
                    for col in 0..w {
                        if self.validity[[ti, r, col]] {
                            x[[ti, ci, r, col]] = (self.frames[[ti, ci, r, col]] - m) / sd;
                        }
                    }
                }
            }
        }
        Ok(x)
    }

    /// Fraction of frames with validity 0 at each pixel, averaged.
    pub fn missing_fraction(&self) -> f64 {
        1.0 - self.validity.iter().filter(|&&v| v).count() as f64 / self.validity.len().max(1) as f64
    }
}

/// Total order on scenes so that compositing does not depend on input order.
fn scene_order(a: &SceneRecord, b: &SceneRecord) -> Ordering {
    a.timestamp.cmp(&b.timestamp).then_with(|| {
        for (x, y) in a.bands.iter().zip(b.bands.iter()) {
            let o = x.to_bits().cmp(&y.to_bits());
            if o != Ordering::Equal {
                return o;
            }
        }
        a.cloud_mask.iter().cmp(b.cloud_mask.iter())
    })
}

/// Per-pixel mean of the clear observations in each period. Periods with no
/// clear observation at a pixel are NaN with validity 0.
pub fn composite(scenes: &[SceneRecord], period: Period) -> Result<SitsCube> {
    let Some(first) = scenes.first() else {
        return Err(Error::InvalidParameter("compositing needs at least one scene".into()));
    };
    let (h, w, c) = first.dims();
    if let Some(bad) = scenes.iter().find(|s| s.dims() != (h, w, c)) {
        return Err(Error::Shape(format!("scene {} has shape {:?}, expected {:?}", bad.timestamp, bad.dims(), (h, w, c))));
    }
    let t = period.count();
    let mut sorted: Vec<&SceneRecord> = scenes.iter().collect();
    sorted.sort_by(|a, b| scene_order(a, b));

    let mut sum = Array4::<f64>::zeros((t, c, h, w));
    let mut n = Array3::<u32>::zeros((t, h, w));
    for scene in sorted {
        let ti = period.of(scene.timestamp) as usize - 1;
        for r in 0..h {
            for col in 0..w {
                if scene.is_clear(r, col) {
                    n[[ti, r, col]] += 1;
                    for ci in 0..c {
                        sum[[ti, ci, r, col]] += scene.bands[[r, col, ci]];
                    }
                }
            }
        }
    }
    for ti in 0..t {
        for ci in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let k = n[[ti, r, col]];
                    sum[[ti, ci, r, col]] = if k == 0 { f64::NAN } else { sum[[ti, ci, r, col]] / k as f64 };
                }
            }
        }
    }
    let validity = n.mapv(|k| k > 0);
    SitsCube::new(sum, (1..=t as u32).collect(), validity)
}

/// Per-channel z-score statistics over valid pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Statistics over every valid pixel of the given cubes (the training
    /// split). A channel with zero spread keeps std 1.
    pub fn from_cubes<'a>(cubes: impl IntoIterator<Item = &'a SitsCube>) -> Result<Self> {
        let mut acc: Vec<(f64, f64, f64)> = Vec::new(); // Welford: count, mean, M2
        for cube in cubes {
            let (t, c, h, w) = cube.dims();
            if acc.is_empty() {
                acc = vec![(0.0, 0.0, 0.0); c];
            } else if acc.len() != c {
                return Err(Error::Shape("cubes disagree on channel count".into()));
            }
            for (ci, a) in acc.iter_mut().enumerate() {
                for ti in 0..t {
                    for r in 0..h {
                        for col in 0..w {
                            if cube.validity[[ti, r, col]] {
                                let v = cube.frames[[ti, ci, r, col]];
                                a.0 += 1.0;
                                let d = v - a.1;
                                a.1 += d / a.0;
                                a.2 += d * (v - a.1);
                            }
                        }
                    }
                }
            }
        }
        if acc.is_empty() || acc[0].0 == 0.0 {
            return Err(Error::NoValidPixels);
        }
        let mean = acc.iter().map(|a| a.1).collect();
        let std = acc
            .iter()
            .map(|a| {
                let sd = (a.2 / a.0).sqrt();
                if sd > 1e-12 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub cube: SitsCube,
    pub quality_mask: Array2<u8>,
    /// {0, 1} under the mask, [`IGNORE`] elsewhere.
    pub labels: Array2<u8>,
    pub tile: TileIndex,
}

pub fn build_patches(
    cube: &SitsCube,
    mask: &QualityMask,
    labels: &FusedLabels,
    plan: &[TileIndex],
) -> Result<Vec<PatchSample>> {
    mask.grid.ensure_aligned(&labels.grid, "quality mask vs fused labels")?;
    let (_, _, h, w) = cube.dims();
    if (mask.grid.height, mask.grid.width) != (h, w) {
        return Err(Error::Misaligned(format!(
            "cube is {h}x{w}, labels are {}x{}",
            mask.grid.height, mask.grid.width
        )));
    }
    plan.iter()
        .map(|t| {
            if t.row0 + t.rows > h || t.col0 + t.cols > w {
                return Err(Error::Misaligned(format!("window {t:?} exceeds the {h}x{w} cube")));
            }
            let win = s![t.row0..t.row0 + t.rows, t.col0..t.col0 + t.cols];
            let quality_mask = mask.mask.slice(win).to_owned();
            let mut tile_labels = labels.labels.slice(win).to_owned();
            tile_labels.zip_mut_with(&quality_mask, |l, &m| {
                if m == 0 {
                    *l = IGNORE;
                }
            });
            Ok(PatchSample { cube: cube.window(t.row0, t.col0, t.rows, t.cols), quality_mask, labels: tile_labels, tile: *t })
        })
        .collect()
}

/// Converts an H×W×C view into a scene with an all-clear mask.
pub fn clear_scene(timestamp: NaiveDate, bands: ArrayView3<f64>) -> SceneRecord {
    let (h, w, _) = bands.dim();
    let cloud_mask = Array2::from_shape_fn((h, w), |(r, c)| bands.slice(s![r, c, ..]).iter().any(|v| !v.is_finite()));
    let cloud_fraction = fraction(&cloud_mask);
    SceneRecord { timestamp, bands: bands.to_owned(), cloud_mask, cloud_fraction }
}

/// Number of frames valid at each pixel.
pub fn valid_counts(cube: &SitsCube) -> Array2<usize> {
    cube.validity.map_axis(Axis(0), |v| v.iter().filter(|&&b| b).count())
}
