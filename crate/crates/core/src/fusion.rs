//! Cropland label fusion across land-cover products.
//!
//! Each product is first reduced to a binary cropland layer. A pixel is a
//! high-quality sample when every product is present and all of them agree;
//! the fused label is then that common value.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{metrics, ConfusionMatrix};
use crate::raster::{Raster, RasterGrid};

/// Ignore/nodata value in binary label rasters.
pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMapping {
    pub product_id: String,
    pub cropland_class_ids: BTreeSet<i64>,
    #[serde(default)]
    pub nodata_class_ids: BTreeSet<i64>,
    /// Codes known to mean "not cropland". Only consulted in strict mode.
    #[serde(default)]
    pub other_class_ids: BTreeSet<i64>,
    /// Reject codes that are in none of the declared sets.
    #[serde(default)]
    pub strict: bool,
}

impl ClassMapping {
    pub fn new(product_id: impl Into<String>, cropland: impl IntoIterator<Item = i64>) -> Self {
        Self {
            product_id: product_id.into(),
            cropland_class_ids: cropland.into_iter().collect(),
            nodata_class_ids: BTreeSet::new(),
            other_class_ids: BTreeSet::new(),
            strict: false,
        }
    }

    pub fn with_nodata(mut self, codes: impl IntoIterator<Item = i64>) -> Self {
        self.nodata_class_ids = codes.into_iter().collect();
        self
    }

    pub fn strict(mut self, others: impl IntoIterator<Item = i64>) -> Self {
        self.other_class_ids = others.into_iter().collect();
        self.strict = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.cropland_class_ids.intersection(&self.nodata_class_ids).next() {
            return Err(Error::Config(format!(
                "product {}: class {c} is both cropland and nodata",
                self.product_id
            )));
        }
        Ok(())
    }
}

/// Maps class codes to {0, 1, [`IGNORE`]}. NaN pixels are nodata.
pub fn binarize_product(raw: &Array2<f64>, mapping: &ClassMapping) -> Result<Array2<u8>> {
    mapping.validate()?;
    let mut out = Array2::<u8>::zeros(raw.dim());
    for (o, &v) in out.iter_mut().zip(raw.iter()) {
        if v.is_nan() {
            *o = IGNORE;
            continue;
        }
        let code = v as i64;
        *o = if mapping.nodata_class_ids.contains(&code) {
            IGNORE
        } else if mapping.cropland_class_ids.contains(&code) {
            1
        } else if !mapping.strict || mapping.other_class_ids.contains(&code) {
            0
        } else {
            return Err(Error::UnmappedClass { product: mapping.product_id.clone(), code });
        };
    }
    Ok(out)
}

/// Binarizes the first band of a product raster, treating the raster's own
/// nodata value as nodata too.
pub fn binarize_raster(raster: &Raster, mapping: &ClassMapping) -> Result<Array2<u8>> {
    let mut band = raster.band(0);
    if let Some(nd) = raster.nodata {
        band.mapv_inplace(|v| if v == nd { f64::NAN } else { v });
    }
    binarize_product(&band, mapping)
}

/// Per-pixel most frequent class over a stack of per-date class rasters.
/// Nodata codes and NaN are skipped; ties go to the smallest code; pixels
/// with no observation come out NaN.
pub fn temporal_mode(dates: &[Array2<f64>], nodata_codes: &BTreeSet<i64>) -> Result<Array2<f64>> {
    let Some(first) = dates.first() else {
        return Err(Error::InvalidParameter("temporal mode needs at least one date".into()));
    };
    if dates.iter().any(|d| d.dim() != first.dim()) {
        return Err(Error::Shape("per-date class rasters differ in size".into()));
    }
    let mut out = Array2::from_elem(first.dim(), f64::NAN);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for ((r, c), o) in out.indexed_iter_mut() {
        counts.clear();
        for d in dates {
            let v = d[[r, c]];
            if v.is_nan() || nodata_codes.contains(&(v as i64)) {
                continue;
            }
            *counts.entry(v as i64).or_default() += 1;
        }
        // BTreeMap iterates codes ascending; keep the first maximum.
        let mut best: Option<(i64, usize)> = None;
        for (&code, &n) in &counts {
            if best.is_none_or(|(_, bn)| n > bn) {
                best = Some((code, n));
            }
        }
        if let Some((code, _)) = best {
            *o = code as f64;
        }
    }
    Ok(out)
}

/// Binary cropland layers of M products on one grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ProductStack {
    pub grid: RasterGrid,
    pub layers: Vec<Array2<u8>>,
    pub product_ids: Vec<String>,
}

impl ProductStack {
    pub fn new(grid: RasterGrid, layers: Vec<Array2<u8>>, product_ids: Vec<String>) -> Result<Self> {
        if layers.len() != product_ids.len() {
            return Err(Error::Shape(format!(
                "{} layers but {} product ids",
                layers.len(),
                product_ids.len()
            )));
        }
        for (layer, id) in layers.iter().zip(&product_ids) {
            if layer.dim() != (grid.height, grid.width) {
                return Err(Error::Misaligned(format!(
                    "product {id} is {:?}, grid is {}x{}",
                    layer.dim(),
                    grid.height,
                    grid.width
                )));
            }
            if let Some(v) = layer.iter().find(|&&v| v > 1 && v != IGNORE) {
                return Err(Error::InvalidParameter(format!("product {id} has non-binary value {v}")));
            }
        }
        Ok(Self { grid, layers, product_ids })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityMask {
    pub grid: RasterGrid,
    /// 1 where every product is present and all agree.
    pub mask: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedLabels {
    pub grid: RasterGrid,
    /// {0, 1} where the mask is 1, [`IGNORE`] elsewhere.
    pub labels: Array2<u8>,
}

/// Rates every pixel by cross-product agreement and emits the fused labels.
pub fn rate_quality(stack: &ProductStack) -> Result<(QualityMask, FusedLabels)> {
    let m = stack.layers.len();
    if m < 2 {
        return Err(Error::TooFewProducts { needed: 2, got: m });
    }
    let (h, w) = (stack.grid.height, stack.grid.width);
    for (layer, id) in stack.layers.iter().zip(&stack.product_ids) {
        if layer.dim() != (h, w) {
            return Err(Error::Misaligned(format!("product {id} does not match the stack grid")));
        }
    }
    let mut mask = Array2::<u8>::zeros((h, w));
    let mut labels = Array2::<u8>::from_elem((h, w), IGNORE);
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0u32;
            let mut agree = true;
            let first = stack.layers[0][[r, c]];
            for layer in &stack.layers {
                let v = layer[[r, c]];
                if v == IGNORE || v != first {
                    agree = false;
                    break;
                }
                sum += v as u32;
            }
            if agree {
                mask[[r, c]] = 1;
                // Unanimous binary layers: the mean is the common value.
                labels[[r, c]] = (sum as usize / m) as u8;
            }
        }
    }
    Ok((
        QualityMask { grid: stack.grid.clone(), mask },
        FusedLabels { grid: stack.grid.clone(), labels },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionStats {
    /// Fraction of pixels with a high-quality label.
    pub label_ratio: f64,
    pub high_quality_pixels: usize,
    pub total_pixels: usize,
    /// Macro F1 (percent) of the fused labels against a reference, over
    /// high-quality pixels; absent without a reference or when undefined.
    pub label_avg_f1: Option<f64>,
}

pub fn fusion_stats(
    mask: &QualityMask,
    labels: &FusedLabels,
    reference: Option<&Array2<u8>>,
) -> Result<FusionStats> {
    mask.grid.ensure_aligned(&labels.grid, "quality mask vs fused labels")?;
    let total = mask.mask.len();
    let hq = mask.mask.iter().filter(|&&v| v == 1).count();
    let label_avg_f1 = match reference {
        None => None,
        Some(reference) => {
            if reference.dim() != mask.mask.dim() {
                return Err(Error::Misaligned("reference raster does not match the label grid".into()));
            }
            let mut cm = ConfusionMatrix::default();
            Zip::from(&mask.mask).and(&labels.labels).and(reference).for_each(|&m, &l, &r| {
                if m == 1 && r != IGNORE {
                    cm.add(r == 1, l == 1);
                }
            });
            if cm.total() == 0 {
                None
            } else {
                Some(metrics(&cm)?.avg_f1)
            }
        }
    };
    Ok(FusionStats {
        label_ratio: if total == 0 { 0.0 } else { hq as f64 / total as f64 },
        high_quality_pixels: hq,
        total_pixels: total,
        label_avg_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(layers: Vec<Array2<u8>>) -> ProductStack {
        let (h, w) = layers[0].dim();
        let ids = (0..layers.len()).map(|i| format!("p{i}")).collect();
        ProductStack::new(RasterGrid::local(w, h), layers, ids).unwrap()
    }

    #[test]
    fn binarize_direct_mapping() {
        let m = ClassMapping::new("esa", [40]);
        let raw = array![[40.0, 10.0], [40.0, 40.0]];
        assert_eq!(binarize_product(&raw, &m).unwrap(), array![[1, 0], [1, 1]]);
    }

    #[test]
    fn binarize_all_nodata() {
        let m = ClassMapping::new("esa", [40]).with_nodata([0]);
        let raw = Array2::zeros((3, 3));
        assert!(binarize_product(&raw, &m).unwrap().iter().all(|&v| v == IGNORE));
        let raw = Array2::from_elem((2, 2), f64::NAN);
        assert!(binarize_product(&raw, &m).unwrap().iter().all(|&v| v == IGNORE));
    }

    #[test]
    fn binarize_strict_rejects_unknown_code() {
        let m = ClassMapping::new("esri", [5]).strict([1, 2]);
        assert!(binarize_product(&array![[5.0, 1.0]], &m).is_ok());
        assert!(matches!(
            binarize_product(&array![[5.0, 9.0]], &m),
            Err(Error::UnmappedClass { code: 9, .. })
        ));
        let bad = ClassMapping::new("x", [1]).with_nodata([1]);
        assert!(matches!(binarize_product(&array![[1.0]], &bad), Err(Error::Config(_))));
    }

    #[test]
    fn binarize_matches_membership_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let crop: BTreeSet<i64> = [3, 7, 11].into();
        let nodata: BTreeSet<i64> = [0].into();
        let m = ClassMapping { nodata_class_ids: nodata.clone(), ..ClassMapping::new("p", crop.clone()) };
        let raw = Array2::from_shape_fn((40, 40), |_| rng.random_range(0..15) as f64);
        let got = binarize_product(&raw, &m).unwrap();
        for (g, &v) in got.iter().zip(raw.iter()) {
            let code = v as i64;
            let want = if nodata.contains(&code) { IGNORE } else { u8::from(crop.contains(&code)) };
            assert_eq!(*g, want);
        }
    }

    #[test]
    fn temporal_mode_picks_most_frequent() {
        let dates = vec![array![[1.0, 2.0]], array![[1.0, 3.0]], array![[4.0, f64::NAN]]];
        let m = temporal_mode(&dates, &BTreeSet::new()).unwrap();
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m[[0, 1]], 2.0); // tie between 2 and 3
        let none = temporal_mode(&[array![[0.0]]], &[0].into()).unwrap();
        assert!(none[[0, 0]].is_nan());
    }

    #[test]
    fn unanimous_and_disagreeing_pixels() {
        let s = stack(vec![array![[1, 1]], array![[1, 0]], array![[1, 1]]]);
        let (mask, labels) = rate_quality(&s).unwrap();
        assert_eq!(mask.mask, array![[1, 0]]);
        assert_eq!(labels.labels, array![[1, IGNORE]]);
    }

    #[test]
    fn nodata_in_any_product_masks_pixel() {
        let s = stack(vec![array![[0, IGNORE]], array![[0, IGNORE]]]);
        let (mask, labels) = rate_quality(&s).unwrap();
        assert_eq!(mask.mask, array![[1, 0]]);
        assert_eq!(labels.labels, array![[0, IGNORE]]);
    }

    #[test]
    fn rate_quality_errors() {
        let one = ProductStack::new(RasterGrid::local(1, 1), vec![array![[1]]], vec!["a".into()]).unwrap();
        assert!(matches!(rate_quality(&one), Err(Error::TooFewProducts { got: 1, .. })));
        assert!(ProductStack::new(
            RasterGrid::local(2, 1),
            vec![array![[1, 0]], array![[1]]],
            vec!["a".into(), "b".into()]
        )
        .is_err());
    }

    #[test]
    fn stats_ratio_and_perfect_f1() {
        let s = stack(vec![array![[1, 0], [0, 1]], array![[1, 0], [0, 1]]]);
        let (mask, labels) = rate_quality(&s).unwrap();
        let reference = array![[1, 0], [0, 1]];
        let st = fusion_stats(&mask, &labels, Some(&reference)).unwrap();
        assert_eq!(st.label_ratio, 1.0);
        assert_eq!(st.label_avg_f1, Some(100.0));
    }

    #[test]
    fn stats_on_empty_mask() {
        let s = stack(vec![array![[1, 0]], array![[0, 1]]]);
        let (mask, labels) = rate_quality(&s).unwrap();
        let st = fusion_stats(&mask, &labels, Some(&array![[1, 1]])).unwrap();
        assert_eq!(st.label_ratio, 0.0);
        assert_eq!(st.label_avg_f1, None);
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_monotone(seed in 0u64..1000, m in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers: Vec<Array2<u8>> = (0..m + 1)
                .map(|_| Array2::from_shape_fn((8, 8), |_| match rng.random_range(0..10) { 0 => IGNORE, v => u8::from(v > 4) }))
                .collect();
            let base = stack(layers[..m].to_vec());
            let (mask, labels) = rate_quality(&base).unwrap();
            let mut rev = layers[..m].to_vec();
            rev.reverse();
            let (rmask, rlabels) = rate_quality(&stack(rev)).unwrap();
            prop_assert_eq!(&mask.mask, &rmask.mask);
            prop_assert_eq!(&labels.labels, &rlabels.labels);
            let (bigger, _) = rate_quality(&stack(layers.clone())).unwrap();
            prop_assert!(bigger.mask.iter().zip(mask.mask.iter()).all(|(&b, &a)| b <= a));
            for ((&mk, &lb), r) in mask.mask.iter().zip(labels.labels.iter()).zip(0..) {
                if mk == 1 {
                    for l in &layers[..m] {
                        prop_assert_eq!(l.as_slice().unwrap()[r], lb);
                    }
                }
            }
        }
    }
}
