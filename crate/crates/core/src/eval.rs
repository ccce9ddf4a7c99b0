//! Accuracy assessment of binary cropland maps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{s, Array2, Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fusion::IGNORE;
use crate::model::ModelInput;
use crate::raster::{mosaic_probabilistic, RasterGrid, TileIndex};
use crate::sits::{PatchSample, SitsCube};

/// 2×2 confusion counts; rows are the reference class, columns the
/// prediction, index 0 = non-crop and 1 = crop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn add(&mut self, reference_crop: bool, predicted_crop: bool) {
        self.counts[reference_crop as usize][predicted_crop as usize] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for r in 0..2 {
            for c in 0..2 {
                self.counts[r][c] += other.counts[r][c];
            }
        }
    }

    /// Each row divided by its reference total.
    pub fn row_normalized(&self) -> [[f64; 2]; 2] {
        let mut out = [[0.0; 2]; 2];
        for r in 0..2 {
            let n: u64 = self.counts[r].iter().sum();
            for c in 0..2 {
                out[r][c] = if n == 0 { 0.0 } else { self.counts[r][c] as f64 / n as f64 };
            }
        }
        out
    }

    /// Each cell divided by the grand total (area ratios).
    pub fn total_normalized(&self) -> [[f64; 2]; 2] {
        let n = self.total();
        let mut out = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                out[r][c] = if n == 0 { 0.0 } else { self.counts[r][c] as f64 / n as f64 };
            }
        }
        out
    }
}

/// Tallies valid pixels. Pixels flagged [`IGNORE`] in either raster are
/// skipped as well.
pub fn confusion(pred: &Array2<u8>, reference: &Array2<u8>, valid: &Array2<bool>) -> Result<ConfusionMatrix> {
    if pred.dim() != reference.dim() || pred.dim() != valid.dim() {
        return Err(Error::Misaligned(format!(
            "prediction {:?}, reference {:?}, validity {:?}",
            pred.dim(),
            reference.dim(),
            valid.dim()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    Zip::from(pred).and(reference).and(valid).for_each(|&p, &r, &v| {
        if v && p != IGNORE && r != IGNORE {
            cm.add(r == 1, p == 1);
        }
    });
    if cm.total() == 0 {
        return Err(Error::NoValidPixels);
    }
    Ok(cm)
}

/// Anything that turns a tile-sized cube into K×h×w class probabilities.
pub trait TilePredictor: Sync {
    fn predict_tile(&self, cube: &SitsCube) -> Result<Array3<f64>>;
}

impl TilePredictor for Checkpoint {
    /// Pads tiles whose sides are not a multiple of the model's downsampling
    /// factor with invalid frames, then crops the prediction back.
    fn predict_tile(&self, cube: &SitsCube) -> Result<Array3<f64>> {
        let (t, c, h, w) = cube.dims();
        self.ensure_compatible(c, t)?;
        let m = self.model.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded;
        let cube = if (ph, pw) == (h, w) {
            cube
        } else {
            let mut frames = ndarray::Array4::from_elem((t, c, ph, pw), f64::NAN);
            frames.slice_mut(s![.., .., ..h, ..w]).assign(&cube.frames);
            let mut validity = Array3::from_elem((t, ph, pw), false);
            validity.slice_mut(s![.., ..h, ..w]).assign(&cube.validity);
            padded = SitsCube::new(frames, cube.period_labels.clone(), validity)?;
            &padded
        };
        let probs = self.model.predict_probs(&ModelInput::from_cube(cube, &self.norm)?)?;
        Ok(probs.slice(s![.., ..h, ..w]).to_owned())
    }
}

/// Sliding-window inference: one prediction per window, probabilistic
/// mosaicking, then argmax. Returns (K×H×W probabilities, binary map).
pub fn map_region(
    predictor: &dyn TilePredictor,
    cube: &SitsCube,
    grid: &RasterGrid,
    plan: &[TileIndex],
) -> Result<(Array3<f64>, Array2<u8>)> {
    let (_, _, h, w) = cube.dims();
    if (grid.height, grid.width) != (h, w) {
        return Err(Error::Misaligned(format!("cube is {h}x{w}, grid is {}x{}", grid.height, grid.width)));
    }
    let tiles: Vec<(TileIndex, Array3<f64>)> = plan
        .par_iter()
        .map(|t| {
            let sub = cube.window(t.row0, t.col0, t.rows, t.cols);
            predictor.predict_tile(&sub).map(|p| (*t, p))
        })
        .collect::<Result<_>>()?;
    let probs = mosaic_probabilistic(&tiles, grid)?;
    let binary = argmax_binary(&probs);
    Ok((probs, binary))
}

/// Seeded sample of per-pixel feature distributions with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    /// (pixel id "patch:row:col", label, features)
    pub rows: Vec<(String, u8, Vec<f64>)>,
}

impl EmbeddingTable {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("pixel_id\tlabel");
        for i in 0..self.dim {
            let _ = write!(s, "\tz{i}");
        }
        s.push('\n');
        for (id, label, f) in &self.rows {
            let _ = write!(s, "{id}\t{label}");
            for v in f {
                let _ = write!(s, "\t{v:.9e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Draws `sample_count` distinct pixels over all patches (all of them if
/// fewer exist) and exports their Z features.
pub fn export_pixel_embeddings(
    checkpoint: &Checkpoint,
    patches: &[PatchSample],
    sample_count: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let dim = checkpoint.model.config.feature_dim();
    let sizes: Vec<usize> = patches.iter().map(|p| p.labels.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, sample_count.min(total)).into_vec();
    picks.sort_unstable();
    let mut rows = Vec::with_capacity(picks.len());
    let mut offset = 0;
    let mut next = picks.iter().peekable();
    for (pi, patch) in patches.iter().enumerate() {
        let end = offset + sizes[pi];
        if next.peek().is_some_and(|&&i| i < end) {
            let z = checkpoint.model.predict_features(&ModelInput::from_cube(&patch.cube, &checkpoint.norm)?)?;
            let w = patch.labels.dim().1;
            while let Some(&&i) = next.peek() {
                if i >= end {
                    break;
                }
                next.next();
                let (r, c) = ((i - offset) / w, (i - offset) % w);
                rows.push((format!("{pi}:{r}:{c}"), patch.labels[[r, c]], z.slice(s![.., r, c]).to_vec()));
            }
        }
        offset = end;
    }
    Ok(EmbeddingTable { dim, rows })
}

/// Crop wherever P(crop) is strictly greater than P(non-crop); ties and
/// non-finite pixels go to non-crop. `probs` is K×H×W with crop at index 1.
pub fn argmax_binary(probs: &Array3<f64>) -> Array2<u8> {
    let (_, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(r, c)| (probs[[1, r, c]] > probs[[0, r, c]]) as u8)
}

/// All accuracies are percentages and unrounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub oa: f64,
    pub miou: f64,
    pub avg_f1: f64,
    pub crop_f1: f64,
    pub noncrop_f1: f64,
    pub pa_crop: f64,
    pub ua_crop: f64,
    pub pa_noncrop: f64,
    pub ua_noncrop: f64,
    pub iou_crop: f64,
    pub iou_noncrop: f64,
    pub confusion: ConfusionMatrix,
    /// Metrics that were undefined and reported as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

struct ClassScores {
    pa: f64,
    ua: f64,
    iou: f64,
    f1: f64,
}

fn class_scores(cm: &ConfusionMatrix, class: usize, name: &str, flags: &mut Vec<String>) -> ClassScores {
    let tp = cm.counts[class][class] as f64;
    let ref_total = cm.counts[class].iter().sum::<u64>() as f64;
    let pred_total = (cm.counts[0][class] + cm.counts[1][class]) as f64;
    let ratio = |num: f64, den: f64, label: &str, flags: &mut Vec<String>| {
        if den == 0.0 {
            flags.push(format!("{label}_{name}"));
            0.0
        } else {
            num / den
        }
    };
    let pa = ratio(tp, ref_total, "pa", flags);
    let ua = ratio(tp, pred_total, "ua", flags);
    let iou = ratio(tp, ref_total + pred_total - tp, "iou", flags);
    let f1 = if pa + ua == 0.0 {
        flags.push(format!("f1_{name}"));
        0.0
    } else {
        2.0 * pa * ua / (pa + ua)
    };
    ClassScores { pa, ua, iou, f1 }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<EvalReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut degenerate = Vec::new();
    let non = class_scores(cm, 0, "noncrop", &mut degenerate);
    let crop = class_scores(cm, 1, "crop", &mut degenerate);
    let pct = 100.0;
    Ok(EvalReport {
        oa: pct * (cm.counts[0][0] + cm.counts[1][1]) as f64 / total as f64,
        miou: pct * (non.iou + crop.iou) / 2.0,
        avg_f1: pct * (non.f1 + crop.f1) / 2.0,
        crop_f1: pct * crop.f1,
        noncrop_f1: pct * non.f1,
        pa_crop: pct * crop.pa,
        ua_crop: pct * crop.ua,
        pa_noncrop: pct * non.pa,
        ua_noncrop: pct * non.ua,
        iou_crop: pct * crop.iou,
        iou_noncrop: pct * non.iou,
        confusion: *cm,
        degenerate,
    })
}

/// Rounds half-up to two decimals.
pub fn round2(v: f64) -> f64 {
    ((v * 100.0) + 0.5 + 1e-9).floor() / 100.0
}

impl EvalReport {
    /// Key-value document with percentages rounded to two decimals, plus
    /// both normalizations of the confusion matrix.
    pub fn to_record(&self) -> serde_json::Value {
        serde_json::json!({
            "oa": round2(self.oa),
            "miou": round2(self.miou),
            "avg_f1": round2(self.avg_f1),
            "crop_f1": round2(self.crop_f1),
            "noncrop_f1": round2(self.noncrop_f1),
            "pa_crop": round2(self.pa_crop),
            "ua_crop": round2(self.ua_crop),
            "pa_noncrop": round2(self.pa_noncrop),
            "ua_noncrop": round2(self.ua_noncrop),
            "iou_crop": round2(self.iou_crop),
            "iou_noncrop": round2(self.iou_noncrop),
            "confusion_counts": self.confusion.counts,
            "confusion_row_normalized": self.confusion.row_normalized(),
            "confusion_total_normalized": self.confusion.total_normalized(),
            "degenerate": self.degenerate,
        })
    }

    pub fn render_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(s, "{:<12}{:>10}{:>10}{:>10}{:>10}", "", "PA(%)", "UA(%)", "IoU(%)", "F1(%)");
        for (name, pa, ua, iou, f1) in [
            ("non-crop", self.pa_noncrop, self.ua_noncrop, self.iou_noncrop, self.noncrop_f1),
            ("crop", self.pa_crop, self.ua_crop, self.iou_crop, self.crop_f1),
        ] {
            let _ = writeln!(
                s,
                "{name:<12}{:>10.2}{:>10.2}{:>10.2}{:>10.2}",
                round2(pa),
                round2(ua),
                round2(iou),
                round2(f1)
            );
        }
        let _ = writeln!(
            s,
            "OA {:.2}%  mIoU {:.2}%  Avg.F1 {:.2}%",
            round2(self.oa),
            round2(self.miou),
            round2(self.avg_f1)
        );
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Plain,
    Hill,
    Mountain,
    Unknown,
}

impl Stratum {
    /// Left-closed intervals: [0°, 2°) plain, [2°, 6°) hill, ≥ 6° mountain.
    pub fn from_slope(degrees: f64) -> Stratum {
        if !degrees.is_finite() {
            Stratum::Unknown
        } else if degrees < 2.0 {
            Stratum::Plain
        } else if degrees < 6.0 {
            Stratum::Hill
        } else {
            Stratum::Mountain
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerrainStrata {
    /// Degrees; NaN where the DEM has no data.
    pub slope: Array2<f64>,
    pub classes: Array2<Stratum>,
}

/// Slope by Horn's 3×3 method. Missing neighbours at the raster edge are
/// linearly extrapolated, so planes keep their exact slope; nodata
/// neighbours take the centre value.
pub fn slope_stratify(dem: &Array2<f64>, cell: f64) -> Result<TerrainStrata> {
    if !(cell > 0.0) {
        return Err(Error::InvalidParameter(format!("cell size {cell} must be positive")));
    }
    let (h, w) = dem.dim();
    let at = |r: isize, c: isize, center: f64| -> f64 {
        let inside = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w;
        let get = |r: isize, c: isize| {
            let v = dem[[r as usize, c as usize]];
            if v.is_nan() { None } else { Some(v) }
        };
        if inside(r, c) {
            return get(r, c).unwrap_or(center);
        }
        // Reflect through the nearest in-grid pixel and extrapolate linearly.
        let cr = r.clamp(0, h as isize - 1);
        let cc = c.clamp(0, w as isize - 1);
        let (mr, mc) = (2 * cr - r, 2 * cc - c);
        let edge = get(cr, cc).unwrap_or(center);
        let mirror = if inside(mr, mc) { get(mr, mc).unwrap_or(center) } else { edge };
        2.0 * edge - mirror
    };
    let mut slope = Array2::from_elem((h, w), f64::NAN);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let z = dem[[r as usize, c as usize]];
            if z.is_nan() {
                continue;
            }
            let v = |dr: isize, dc: isize| at(r + dr, c + dc, z);
            let dzdx = ((v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1)))
                / (8.0 * cell);
            let dzdy = ((v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1)))
                / (8.0 * cell);
            slope[[r as usize, c as usize]] = (dzdx * dzdx + dzdy * dzdy).sqrt().atan().to_degrees();
        }
    }
    let classes = slope.mapv(Stratum::from_slope);
    Ok(TerrainStrata { slope, classes })
}

/// One report per terrain stratum present among the valid pixels.
pub fn stratified_report(
    pred: &Array2<u8>,
    reference: &Array2<u8>,
    valid: &Array2<bool>,
    strata: &TerrainStrata,
) -> Result<BTreeMap<Stratum, EvalReport>> {
    if strata.classes.dim() != pred.dim() {
        return Err(Error::Misaligned("terrain strata do not match the map".into()));
    }
    let mut out = BTreeMap::new();
    for stratum in [Stratum::Plain, Stratum::Hill, Stratum::Mountain] {
        let mask = Zip::from(valid).and(&strata.classes).map_collect(|&v, &s| v && s == stratum);
        match confusion(pred, reference, &mask) {
            Ok(cm) => {
                out.insert(stratum, metrics(&cm)?);
            }
            Err(Error::NoValidPixels) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
