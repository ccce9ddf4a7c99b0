//! Synthetic phenology worlds and the missing-data corruption protocol.
//!
//! A world is a square landscape split into terrain zones (plain, hill,
//! mountain as column bands), tessellated into rectangular fields whose size
//! shrinks with relief. Every field carries one land-cover class; cropland
//! follows a sharp sow-grow-harvest greenness curve while other vegetation is
//! smoother. M pseudo-products derive from the truth through boundary
//! erosion/dilation, whole-field flips and per-pixel salt noise.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::index;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{confusion, map_region, metrics, EvalReport, Stratum, TilePredictor};
use crate::fusion::{ProductStack, IGNORE};
use crate::raster::{RasterGrid, TileIndex};
use crate::sits::{SceneRecord, SitsCube};
use crate::train::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandCover {
    Crop,
    Grass,
    Forest,
    Bare,
}

impl LandCover {
    pub const ALL: [LandCover; 4] = [LandCover::Crop, LandCover::Grass, LandCover::Forest, LandCover::Bare];

    pub fn code(self) -> u8 {
        self as u8
    }

    fn vegetated(self) -> bool {
        self != LandCover::Bare
    }
}

/// Structured error processes applied independently to each pseudo-product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorRates {
    /// Probability that a product assigns a whole field the wrong class.
    pub field_flip: f64,
    /// Radius of the erosion or dilation applied to the crop mask.
    pub boundary_px: usize,
    /// Per-pixel flip probability.
    pub salt: f64,
}

impl Default for ErrorRates {
    fn default() -> Self {
        Self { field_flip: 0.1, boundary_px: 1, salt: 0.005 }
    }
}

impl ErrorRates {
    pub fn none() -> Self {
        Self { field_flip: 0.0, boundary_px: 0, salt: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub size: usize,
    pub frames: usize,
    pub channels: usize,
    pub products: usize,
    /// Share of columns given to plain, hill and mountain zones.
    pub terrain_mix: [f64; 3],
    /// Mean field side in pixels per zone.
    pub field_size: [f64; 3],
    /// Probability that a field is cropland, per zone.
    pub crop_fraction: [f64; 3],
    /// Terrain slope per zone in degrees.
    pub slope_deg: [f64; 3],
    pub errors: ErrorRates,
    /// Per-pixel reflectance noise.
    pub noise_sd: f64,
    /// Per-field jitter of the crop peak month.
    pub phase_jitter: f64,
    /// Per-field relative jitter of the greenness amplitude.
    pub amplitude_jitter: f64,
    /// Moves every vegetation curve later in the year by this many months.
    pub phase_shift_months: f64,
    /// Fraction of each scene hidden under a single cloud blob.
    pub cloud_fraction: f64,
    /// Forces every field to one class.
    pub single_class: Option<LandCover>,
    pub pixel_size: f64,
    pub year: i32,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            size: 256,
            frames: 12,
            channels: 4,
            products: 3,
            terrain_mix: [0.4, 0.35, 0.25],
            field_size: [32.0, 12.0, 6.0],
            crop_fraction: [0.55, 0.45, 0.35],
            slope_deg: [0.8, 4.0, 12.0],
            errors: ErrorRates::default(),
            noise_sd: 0.02,
            phase_jitter: 0.5,
            amplitude_jitter: 0.1,
            phase_shift_months: 0.0,
            cloud_fraction: 0.0,
            single_class: None,
            pixel_size: 10.0,
            year: 2020,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.size < 64 {
            return bad(format!("world size {} is below 64", self.size));
        }
        if self.products < 2 {
            return bad(format!("{} products, at least 2 needed", self.products));
        }
        if self.frames == 0 || self.channels == 0 {
            return bad("frames and channels must be positive".into());
        }
        if self.terrain_mix.iter().any(|&v| !(v >= 0.0)) || self.terrain_mix.iter().sum::<f64>() <= 0.0 {
            return bad(format!("terrain mix {:?} must be non-negative with a positive sum", self.terrain_mix));
        }
        if self.field_size.iter().any(|&v| !(v >= 2.0)) {
            return bad(format!("field sizes {:?} must be at least 2 pixels", self.field_size));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.crop_fraction.iter().all(|&v| unit(v)) {
            return bad(format!("crop fractions {:?} must lie in [0, 1]", self.crop_fraction));
        }
        if !self.slope_deg.iter().all(|&v| (0.0..90.0).contains(&v)) {
            return bad(format!("slopes {:?} must lie in [0, 90)", self.slope_deg));
        }
        let e = &self.errors;
        if !unit(e.field_flip) || !unit(e.salt) {
            return bad("error rates must lie in [0, 1]".into());
        }
        if !(self.noise_sd >= 0.0 && self.phase_jitter >= 0.0 && self.amplitude_jitter >= 0.0) {
            return bad("noise and jitter must be non-negative".into());
        }
        if !self.phase_shift_months.is_finite() {
            return bad("phase shift must be finite".into());
        }
        if !(0.0..1.0).contains(&self.cloud_fraction) {
            return bad(format!("cloud fraction {} must lie in [0, 1)", self.cloud_fraction));
        }
        if !(self.pixel_size > 0.0) {
            return bad("pixel size must be positive".into());
        }
        Ok(())
    }
}

/// Seasonal greenness in [0, 1] at a (fractional) month.
pub fn greenness(class: LandCover, month: f64, peak_shift: f64, amplitude: f64) -> f64 {
    let bump = |centre: f64, width: f64| {
        let d = (month - centre - peak_shift) / width;
        (-0.5 * d * d).exp()
    };
    match class {
        LandCover::Crop => 0.12 + 0.75 * amplitude * bump(7.0, 1.2),
        LandCover::Grass => 0.35 + 0.25 * amplitude * bump(6.5, 3.0),
        LandCover::Forest => 0.65 + 0.15 * amplitude * bump(7.0, 3.5),
        LandCover::Bare => 0.08,
    }
}

/// Reflectance of channel `c` for a greenness value: blue, green, red, nir,
/// then alternating visible/infrared-like responses.
pub fn reflectance(c: usize, g: f64) -> f64 {
    const TABLE: [(f64, f64); 4] = [(0.05, -0.02), (0.07, 0.03), (0.10, -0.07), (0.15, 0.35)];
    match TABLE.get(c) {
        Some(&(a, b)) => a + b * g,
        None if c % 2 == 0 => 0.12 - 0.05 * g,
        None => 0.18 + 0.2 * g,
    }
}

/// Month (1..=12 scale) at the middle of frame `t` of `frames` per year.
pub fn frame_month(t: usize, frames: usize) -> f64 {
    (t as f64 + 0.5) * 12.0 / frames as f64 + 0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub id: u32,
    pub zone: Stratum,
    pub class: LandCover,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub peak_shift: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub grid: RasterGrid,
    /// Binary cropland truth.
    pub truth: Array2<u8>,
    pub land_cover: Array2<u8>,
    pub field_ids: Array2<u32>,
    pub fields: Vec<Field>,
    pub zones: Array2<Stratum>,
    pub dem: Array2<f64>,
    /// Binary pseudo-products.
    pub products: Vec<Array2<u8>>,
    pub scenes: Vec<SceneRecord>,
}

impl SyntheticWorld {
    pub fn product_ids(&self) -> Vec<String> {
        (0..self.products.len()).map(|i| format!("product{i}")).collect()
    }

    pub fn product_stack(&self) -> Result<ProductStack> {
        ProductStack::new(self.grid.clone(), self.products.clone(), self.product_ids())
    }

    /// Mean (noise-free, unshifted-jitter) T×C reflectance curve per class.
    pub fn class_curves(&self) -> BTreeMap<LandCover, Array2<f64>> {
        let cfg = &self.config;
        LandCover::ALL
            .iter()
            .map(|&lc| {
                let shift = if lc.vegetated() { cfg.phase_shift_months } else { 0.0 };
                let curve = Array2::from_shape_fn((cfg.frames, cfg.channels), |(t, c)| {
                    reflectance(c, greenness(lc, frame_month(t, cfg.frames), shift, 1.0))
                });
                (lc, curve)
            })
            .collect()
    }
}

fn zone_bounds(size: usize, mix: [f64; 3]) -> [usize; 4] {
    let total: f64 = mix.iter().sum();
    let mut b = [0; 4];
    let mut acc = 0.0;
    for z in 0..3 {
        acc += mix[z] / total;
        b[z + 1] = ((acc * size as f64).round() as usize).min(size);
    }
    b[3] = size;
    b
}

/// Recursively splits a rectangle until both sides are close to `target`.
fn split_fields(rect: (usize, usize, usize, usize), target: f64, rng: &mut ChaCha8Rng, out: &mut Vec<(usize, usize, usize, usize)>) {
    let mut stack = vec![rect];
    while let Some((r0, c0, h, w)) = stack.pop() {
        let limit = (target * 1.3).max(2.0);
        if (h as f64) <= limit && (w as f64) <= limit {
            out.push((r0, c0, h, w));
            continue;
        }
        let cut = |len: usize, rng: &mut ChaCha8Rng| {
            let lo = ((len as f64 * 0.35).round() as usize).max(1);
            let hi = ((len as f64 * 0.65).round() as usize).clamp(lo, len - 1);
            rng.random_range(lo..=hi)
        };
        if h >= w {
            let k = cut(h, rng);
            stack.push((r0 + k, c0, h - k, w));
            stack.push((r0, c0, k, w));
        } else {
            let k = cut(w, rng);
            stack.push((r0, c0 + k, h, w - k));
            stack.push((r0, c0, h, k));
        }
    }
}

fn morph(mask: &Array2<u8>, radius: usize, dilate: bool) -> Array2<u8> {
    let (h, w) = mask.dim();
    let target = if dilate { 1 } else { 0 };
    Array2::from_shape_fn((h, w), |(r, c)| {
        let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(h - 1));
        let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(w - 1));
        let hit = (r0..=r1).any(|i| (c0..=c1).any(|j| mask[[i, j]] == target));
        if hit {
            target
        } else {
            1 - target
        }
    })
}

fn corrupt_product(world_truth: &Array2<u8>, field_ids: &Array2<u32>, n_fields: usize, e: &ErrorRates, seed: u64) -> Array2<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = if e.boundary_px > 0 {
        let dilate = rng.random_bool(0.5);
        morph(world_truth, e.boundary_px, dilate)
    } else {
        world_truth.clone()
    };
    let flipped: Vec<bool> = (0..n_fields).map(|_| e.field_flip > 0.0 && rng.random_bool(e.field_flip)).collect();
    for ((v, &fid), &t) in p.iter_mut().zip(field_ids).zip(world_truth) {
        if flipped[fid as usize] {
            *v = 1 - t;
        }
    }
    if e.salt > 0.0 {
        for v in p.iter_mut() {
            if rng.random_bool(e.salt) {
                *v = 1 - *v;
            }
        }
    }
    p
}

/// Grows one 4-connected blob of exactly `area` pixels from a random centre.
fn grow_blob(h: usize, w: usize, area: usize, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let mut blob = Array2::from_elem((h, w), false);
    if area == 0 {
        return blob;
    }
    let start = (rng.random_range(0..h), rng.random_range(0..w));
    let mut frontier = vec![start];
    let mut count = 0;
    while count < area {
        let i = rng.random_range(0..frontier.len());
        let (r, c) = frontier.swap_remove(i);
        if blob[[r, c]] {
            continue;
        }
        blob[[r, c]] = true;
        count += 1;
        let mut push = |rr: usize, cc: usize| {
            if !blob[[rr, cc]] {
                frontier.push((rr, cc));
            }
        };
        if r > 0 {
            push(r - 1, c);
        }
        if r + 1 < h {
            push(r + 1, c);
        }
        if c > 0 {
            push(r, c - 1);
        }
        if c + 1 < w {
            push(r, c + 1);
        }
    }
    blob
}

/// Builds a world and its (clear-sky unless clouds are configured) cube.
pub fn generate_world(cfg: &WorldConfig) -> Result<(SyntheticWorld, SitsCube)> {
    cfg.validate()?;
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bounds = zone_bounds(n, cfg.terrain_mix);
    let strata = [Stratum::Plain, Stratum::Hill, Stratum::Mountain];

    let mut fields = Vec::new();
    let mut field_ids = Array2::zeros((n, n));
    let mut zones = Array2::from_elem((n, n), Stratum::Plain);
    for z in 0..3 {
        let (c0, c1) = (bounds[z], bounds[z + 1]);
        if c1 <= c0 {
            continue;
        }
        let mut rects = Vec::new();
        split_fields((0, c0, n, c1 - c0), cfg.field_size[z], &mut rng, &mut rects);
        for (r0, fc0, h, w) in rects {
            let class = match cfg.single_class {
                Some(lc) => lc,
                None if rng.random_bool(cfg.crop_fraction[z]) => LandCover::Crop,
                None => match rng.random::<f64>() {
                    u if u < 0.45 => LandCover::Grass,
                    u if u < 0.85 => LandCover::Forest,
                    _ => LandCover::Bare,
                },
            };
            let jitter = |sd: f64, rng: &mut ChaCha8Rng| if sd > 0.0 { Normal::new(0.0, sd).unwrap().sample(rng) } else { 0.0 };
            let peak_shift = jitter(cfg.phase_jitter, &mut rng);
            let amplitude = (1.0 + jitter(cfg.amplitude_jitter, &mut rng)).max(0.2);
            let id = fields.len() as u32;
            field_ids.slice_mut(ndarray::s![r0..r0 + h, fc0..fc0 + w]).fill(id);
            zones.slice_mut(ndarray::s![r0..r0 + h, fc0..fc0 + w]).fill(strata[z]);
            fields.push(Field { id, zone: strata[z], class, row0: r0, col0: fc0, rows: h, cols: w, peak_shift, amplitude });
        }
    }
    let land_cover = field_ids.mapv(|id: u32| fields[id as usize].class.code());
    let truth = field_ids.mapv(|id: u32| u8::from(fields[id as usize].class == LandCover::Crop));

    // A ramp climbing eastward at each zone's slope, with a gentle
    // north-south undulation.
    let ps = cfg.pixel_size;
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let mut column_base = vec![0.0; n];
    for c in 1..n {
        let z = (0..3).find(|&z| c - 1 < bounds[z + 1]).unwrap_or(2);
        column_base[c] = column_base[c - 1] + cfg.slope_deg[z].to_radians().tan() * ps;
    }
    let k = std::f64::consts::TAU / (64.0 * ps);
    let dem = Array2::from_shape_fn((n, n), |(r, c)| {
        let z = (0..3).find(|&z| c < bounds[z + 1]).unwrap_or(2);
        let amp = 0.25 * cfg.slope_deg[z].to_radians().tan() / k;
        100.0 + column_base[c] + amp * (k * r as f64 * ps + phase).sin()
    });

    let products = (0..cfg.products)
        .map(|m| corrupt_product(&truth, &field_ids, fields.len(), &cfg.errors, mix(cfg.seed ^ 0x5EED, m as u64)))
        .collect();

    let (t_len, ch) = (cfg.frames, cfg.channels);
    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).unwrap();
    let start = NaiveDate::from_ymd_opt(cfg.year, 1, 1).ok_or_else(|| Error::InvalidParameter(format!("year {}", cfg.year)))?;
    let year_days = NaiveDate::from_ymd_opt(cfg.year + 1, 1, 1).unwrap().signed_duration_since(start).num_days();
    let mut scenes = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let month = frame_month(t, t_len);
        let curves: Vec<Vec<f64>> = fields
            .iter()
            .map(|f| {
                let shift = if f.class.vegetated() { cfg.phase_shift_months + f.peak_shift } else { 0.0 };
                let g = greenness(f.class, month, shift, f.amplitude);
                (0..ch).map(|c| reflectance(c, g)).collect()
            })
            .collect();
        let mut frame_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1000 + t as u64));
        let mut bands = Array3::zeros((n, n, ch));
        for ((r, c, b), v) in bands.indexed_iter_mut() {
            let base = curves[field_ids[[r, c]] as usize][b];
            *v = if cfg.noise_sd > 0.0 { base + noise.sample(&mut frame_rng) } else { base };
        }
        let cloud = grow_blob(n, n, (cfg.cloud_fraction * (n * n) as f64).round() as usize, &mut frame_rng);
        for ((r, c), &cl) in cloud.indexed_iter() {
            if cl {
                bands.slice_mut(ndarray::s![r, c, ..]).fill(0.45);
            }
        }
        let day = ((t as f64 + 0.5) * year_days as f64 / t_len as f64).floor() as i64;
        scenes.push(SceneRecord::new(start + Duration::days(day), bands, cloud)?);
    }

    let labels: Vec<u32> = if t_len == 12 { (1..=12).collect() } else { (1..=t_len as u32).collect() };
    let mut frames = Array4::zeros((t_len, ch, n, n));
    let mut validity = Array3::from_elem((t_len, n, n), true);
    for (t, s) in scenes.iter().enumerate() {
        for ((r, c, b), &v) in s.bands.indexed_iter() {
            frames[[t, b, r, c]] = if s.cloud_mask[[r, c]] { f64::NAN } else { v };
        }
        validity.index_axis_mut(Axis(0), t).assign(&s.cloud_mask.mapv(|c| !c));
    }
    let cube = SitsCube::new(frames, labels, validity)?;
    let grid = RasterGrid::new(n, n, (0.0, n as f64 * ps), ps, "LOCAL")?;
    Ok((
        SyntheticWorld { config: cfg.clone(), grid, truth, land_cover, field_ids, fields, zones, dem, products, scenes },
        cube,
    ))
}

/// Frame drops plus one cloud blob per surviving frame. Only validity
/// changes; reflectance values are left untouched.
pub fn corrupt_cube(cube: &SitsCube, spatial_rate: f64, temporal_rate: f64, seed: u64) -> Result<SitsCube> {
    for (name, r) in [("spatial", spatial_rate), ("temporal", temporal_rate)] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidParameter(format!("{name} rate {r} outside [0, 1]")));
        }
    }
    let (t, _, h, w) = cube.dims();
    let drop = (temporal_rate * t as f64).round() as usize;
    if drop >= t {
        return Err(Error::InvalidParameter(format!(
            "temporal rate {temporal_rate} drops all {t} frames; at least one must survive"
        )));
    }
    let mut out = cube.clone();
    if drop == 0 && spatial_rate == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropped = vec![false; t];
    for i in index::sample(&mut rng, t, drop) {
        dropped[i] = true;
        out.validity.index_axis_mut(Axis(0), i).fill(false);
    }
    let area = (spatial_rate * (h * w) as f64).round() as usize;
    for (i, _) in dropped.iter().enumerate().filter(|(_, d)| !**d) {
        let blob = grow_blob(h, w, area, &mut rng);
        let mut v = out.validity.index_axis_mut(Axis(0), i);
        ndarray::Zip::from(&mut v).and(&blob).for_each(|v, &b| *v &= !b);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    pub spatial_rates: Vec<f64>,
    pub temporal_rates: Vec<f64>,
    pub seed: u64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            spatial_rates: (0..5).map(|i| i as f64 / 10.0).collect(),
            temporal_rates: (0..11).map(|k| k as f64 / 12.0).collect(),
            seed: 0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spatial_rates.is_empty() || self.temporal_rates.is_empty() {
            return Err(Error::Config("corruption grid needs at least one rate per axis".into()));
        }
        if let Some(r) = self.spatial_rates.iter().chain(&self.temporal_rates).find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("rate {r} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub spatial_rate: f64,
    pub temporal_rate: f64,
    pub report: EvalReport,
    /// Frames invalidated by the drop step.
    pub dropped_frames: usize,
    /// Newly masked fraction of each surviving frame.
    pub spatial_fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RobustnessGrid {
    pub spatial_rates: Vec<f64>,
    pub temporal_rates: Vec<f64>,
    /// Row-major: spatial rate outer, temporal rate inner.
    pub cells: Vec<GridCell>,
}

impl RobustnessGrid {
    pub fn cell(&self, i: usize, j: usize) -> &GridCell {
        &self.cells[i * self.temporal_rates.len() + j]
    }

    pub fn records(&self) -> Vec<serde_json::Value> {
        self.cells
            .iter()
            .map(|c| {
                let mut rec = c.report.to_record();
                rec["spatial_rate"] = c.spatial_rate.into();
                rec["temporal_rate"] = c.temporal_rate.into();
                rec["dropped_frames"] = c.dropped_frames.into();
                rec
            })
            .collect()
    }

    /// Average F1 with spatial rates down and temporal rates across.
    pub fn render_heat_table(&self) -> String {
        let mut s = String::from("avg F1 (%)  spatial \\ temporal\n        ");
        for t in &self.temporal_rates {
            s += &format!("{:>7.1}", t * 100.0);
        }
        s.push('\n');
        for (i, sr) in self.spatial_rates.iter().enumerate() {
            s += &format!("{:>7.1}%", sr * 100.0);
            for j in 0..self.temporal_rates.len() {
                s += &format!("{:>7.2}", self.cell(i, j).report.avg_f1);
            }
            s.push('\n');
        }
        s
    }
}

/// Maps the region once per (spatial, temporal) cell on a freshly corrupted
/// copy of the cube and scores it against the reference.
pub fn robustness_grid(
    predictor: &dyn TilePredictor,
    cube: &SitsCube,
    reference: &Array2<u8>,
    grid: &RasterGrid,
    plan: &[TileIndex],
    cfg: &CorruptionConfig,
) -> Result<RobustnessGrid> {
    cfg.validate()?;
    let valid = reference.mapv(|v| v != IGNORE);
    let (t, _, h, w) = cube.dims();
    let pairs: Vec<(usize, usize)> = (0..cfg.spatial_rates.len())
        .flat_map(|i| (0..cfg.temporal_rates.len()).map(move |j| (i, j)))
        .collect();
    let cells = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (sr, tr) = (cfg.spatial_rates[i], cfg.temporal_rates[j]);
            let seed = mix(cfg.seed, (i as u64) << 32 | j as u64);
            let corrupted = corrupt_cube(cube, sr, tr, seed)?;
            let mut dropped_frames = 0;
            let mut spatial_fractions = Vec::new();
            for f in 0..t {
                let before = cube.validity.index_axis(Axis(0), f);
                let after = corrupted.validity.index_axis(Axis(0), f);
                let lost = ndarray::Zip::from(&before).and(&after).fold(0usize, |n, &b, &a| n + usize::from(b && !a));
                if after.iter().all(|v| !v) && before.iter().any(|&v| v) {
                    dropped_frames += 1;
                } else {
                    spatial_fractions.push(lost as f64 / (h * w) as f64);
                }
            }
            let (_, binary) = map_region(predictor, &corrupted, grid, plan)?;
            let report = metrics(&confusion(&binary, reference, &valid)?)?;
            Ok(GridCell { spatial_rate: sr, temporal_rate: tr, report, dropped_frames, spatial_fractions })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessGrid { spatial_rates: cfg.spatial_rates.clone(), temporal_rates: cfg.temporal_rates.clone(), cells })
}

/// Pixel accuracy of `labels` against `truth` over pixels that are not IGNORE.
pub fn label_accuracy(labels: &Array2<u8>, truth: &Array2<u8>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (&l, &t) in labels.iter().zip(truth) {
        if l != IGNORE {
            n += 1;
            hit += usize::from(l == t);
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        hit as f64 / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::rate_quality;
    use proptest::prelude::*;

    fn small(seed: u64) -> WorldConfig {
        WorldConfig { size: 64, seed, ..Default::default() }
    }

    #[test]
    fn worlds_are_deterministic() {
        let (a, ca) = generate_world(&small(3)).unwrap();
        let (b, cb) = generate_world(&small(3)).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.products, b.products);
        assert_eq!(a.dem, b.dem);
        assert_eq!(ca, cb);
        let (c, _) = generate_world(&small(4)).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn clean_products_equal_truth() {
        let cfg = WorldConfig { errors: ErrorRates::none(), ..small(1) };
        let (w, _) = generate_world(&cfg).unwrap();
        for p in &w.products {
            assert_eq!(p, &w.truth);
        }
        let (mask, fused) = rate_quality(&w.product_stack().unwrap()).unwrap();
        assert!(mask.mask.iter().all(|&m| m == 1));
        assert_eq!(fused.labels, w.truth);
    }

    #[test]
    fn single_class_world_follows_its_curve() {
        let cfg = WorldConfig { single_class: Some(LandCover::Grass), phase_jitter: 0.0, amplitude_jitter: 0.0, ..small(2) };
        let (w, cube) = generate_world(&cfg).unwrap();
        let curve = &w.class_curves()[&LandCover::Grass];
        let sd = cfg.noise_sd;
        for ((t, c, _, _), &v) in cube.frames.indexed_iter() {
            assert!((v - curve[[t, c]]).abs() < 6.0 * sd);
        }
        let n = (64 * 64) as f64;
        for t in 0..cfg.frames {
            for c in 0..cfg.channels {
                let mean = cube.frames.slice(ndarray::s![t, c, .., ..]).mean().unwrap();
                assert!((mean - curve[[t, c]]).abs() < 5.0 * sd / n.sqrt());
            }
        }
    }

    #[test]
    fn crop_curve_peaks_mid_year() {
        let g: Vec<f64> = (0..12).map(|t| greenness(LandCover::Crop, frame_month(t, 12), 0.0, 1.0)).collect();
        let peak = g.iter().cloned().fold(f64::MIN, f64::max);
        assert!(g[0] < 0.2 && g[11] < 0.2 && peak > 0.8);
        assert_eq!(frame_month(0, 12), 1.0);
        assert_eq!(frame_month(11, 12), 12.0);
    }

    #[test]
    fn fields_shrink_with_relief() {
        let (w, _) = generate_world(&WorldConfig { seed: 9, ..Default::default() }).unwrap();
        let mean_area = |z: Stratum| {
            let f: Vec<_> = w.fields.iter().filter(|f| f.zone == z).collect();
            f.iter().map(|f| (f.rows * f.cols) as f64).sum::<f64>() / f.len() as f64
        };
        assert!(mean_area(Stratum::Plain) > mean_area(Stratum::Hill));
        assert!(mean_area(Stratum::Hill) > mean_area(Stratum::Mountain));
        let strata = crate::eval::slope_stratify(&w.dem, w.config.pixel_size).unwrap();
        let agree = strata.classes.iter().zip(&w.zones).filter(|(a, b)| a == b).count();
        assert!(agree as f64 / w.zones.len() as f64 > 0.9);
    }

    #[test]
    fn fusion_beats_single_products_in_most_seeds() {
        for flip in [0.1, 0.2, 0.3] {
            let mut wins = 0;
            for seed in 0..20 {
                let cfg = WorldConfig {
                    errors: ErrorRates { field_flip: flip, boundary_px: 1, salt: 0.005 },
                    ..small(seed)
                };
                let (w, _) = generate_world(&cfg).unwrap();
                let (_, fused) = rate_quality(&w.product_stack().unwrap()).unwrap();
                let fused_acc = label_accuracy(&fused.labels, &w.truth);
                if w.products.iter().all(|p| fused_acc > label_accuracy(p, &w.truth)) {
                    wins += 1;
                }
            }
            assert!(wins > 10, "flip {flip}: {wins}/20");
        }
    }

    #[test]
    fn corruption_counts_match_rates() {
        let (_, cube) = generate_world(&small(5)).unwrap();
        let out = corrupt_cube(&cube, 0.3, 0.5, 11).unwrap();
        let dead = (0..12).filter(|&t| out.validity.index_axis(Axis(0), t).iter().all(|v| !v)).count();
        assert_eq!(dead, 6);
        for t in 0..12 {
            let lost = out.validity.index_axis(Axis(0), t).iter().filter(|v| !**v).count() as f64 / 4096.0;
            assert!(lost == 1.0 || (0.295..=0.305).contains(&lost), "{lost}");
        }
        assert_eq!(out.frames.as_slice().unwrap().len(), cube.frames.len());
        for (a, b) in out.frames.iter().zip(&cube.frames) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(corrupt_cube(&cube, 0.0, 0.0, 1).unwrap(), cube);
        assert!(corrupt_cube(&cube, 0.0, 1.0, 1).is_err());
        assert!(corrupt_cube(&cube, -0.1, 0.0, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn blobs_are_exact_and_connected(h in 4usize..40, w in 4usize..40, rate in 0.0f64..1.0, seed in any::<u64>()) {
            let area = (rate * (h * w) as f64).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blob = grow_blob(h, w, area, &mut rng);
            prop_assert_eq!(blob.iter().filter(|b| **b).count(), area);
            if area > 0 {
                // flood fill from one member reaches all of them
                let start = blob.indexed_iter().find(|(_, b)| **b).unwrap().0;
                let mut seen = Array2::from_elem((h, w), false);
                let mut stack = vec![start];
                let mut n = 0;
                while let Some((r, c)) = stack.pop() {
                    if seen[[r, c]] || !blob[[r, c]] { continue; }
                    seen[[r, c]] = true;
                    n += 1;
                    if r > 0 { stack.push((r - 1, c)); }
                    if r + 1 < h { stack.push((r + 1, c)); }
                    if c > 0 { stack.push((r, c - 1)); }
                    if c + 1 < w { stack.push((r, c + 1)); }
                }
                prop_assert_eq!(n, area);
            }
        }

        #[test]
        fn corruption_only_touches_validity(sr in 0.0f64..0.5, tr in 0.0f64..0.9, seed in any::<u64>()) {
            let cfg = WorldConfig { size: 64, frames: 6, channels: 2, seed: 1, ..Default::default() };
            let (_, cube) = generate_world(&cfg).unwrap();
            let out = corrupt_cube(&cube, sr, tr, seed).unwrap();
            prop_assert!(out.frames.iter().zip(&cube.frames).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert!(out.validity.iter().zip(&cube.validity).all(|(&a, &b)| !a || b));
            let dead = (0..6).filter(|&t| out.validity.index_axis(Axis(0), t).iter().all(|v| !v)).count();
            prop_assert_eq!(dead, (tr * 6.0).round() as usize);
        }
    }
}
