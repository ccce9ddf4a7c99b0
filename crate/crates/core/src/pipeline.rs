//! Dataset-level steps driven by a manifest: read scenes into a cube, fuse
//! the products, cut patches and keep them in an on-disk store.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};
use crate::fusion::{
    binarize_raster, fusion_stats, rate_quality, temporal_mode, FusedLabels, FusionStats, ProductStack, QualityMask,
    IGNORE,
};
use crate::manifest::{DatasetManifest, Region};
use crate::nn::Tensor;
use crate::raster::{align_to_grid, read_raster, tile_plan, Raster, RasterGrid, Resampling, TileIndex};
use crate::sits::{
    build_patches, cloud_mask_from_qa, composite, fill_all, filter_scenes, NormStats, PatchSample, SceneRecord,
    SitsCube,
};
use crate::synth::corrupt_cube;

/// Environment variable naming the patch-store directory.
pub const CACHE_ENV: &str = "CROPLANDWS_CACHE";

/// Reads every listed scene on the grid of the first one.
pub fn load_scenes(m: &DatasetManifest) -> Result<(RasterGrid, Vec<SceneRecord>)> {
    let mut names: Vec<&str> = m.bands.iter().map(String::as_str).collect();
    if let Some(qa) = &m.qa {
        names.push(&qa.band);
    }
    let mut grid: Option<RasterGrid> = None;
    let mut scenes = Vec::with_capacity(m.scenes.len());
    for entry in &m.scenes {
        let path = m.resolve(&entry.path);
        let raster = read_raster(&path, &names)?;
        match &grid {
            None => grid = Some(raster.grid.clone()),
            Some(g) => g.ensure_aligned(&raster.grid, &format!("scene {}", path.display()))?,
        }
        let c = m.bands.len();
        let bands = raster.data.slice(s![.., .., ..c]).to_owned();
        let mut cloud = raster.validity().mapv(|v| !v);
        if let Some(qa) = &m.qa {
            let flags = cloud_mask_from_qa(&raster.band(c), &qa.cloud_bits);
            cloud.zip_mut_with(&flags, |a, &b| *a |= b);
        }
        scenes.push(SceneRecord::new(entry.date, bands, cloud)?);
    }
    Ok((grid.expect("manifest has at least one scene"), scenes))
}

/// Grid of the first scene, which every other input is placed on.
pub fn scene_grid(m: &DatasetManifest) -> Result<RasterGrid> {
    Ok(read_raster(m.resolve(&m.scenes[0].path), &[])?.grid)
}

/// Cloud filter, gap filling from neighbouring dates, then periodic
/// compositing.
pub fn build_cube(m: &DatasetManifest) -> Result<(RasterGrid, SitsCube)> {
    let (grid, scenes) = load_scenes(m)?;
    let kept = filter_scenes(scenes, m.max_cloud);
    if kept.is_empty() {
        return Err(Error::InvalidParameter(format!("every scene exceeds max_cloud {}", m.max_cloud)));
    }
    let filled = fill_all(&kept)?;
    Ok((grid, composite(&filled, m.period)?))
}

fn on_grid(raster: Raster, grid: &RasterGrid) -> Result<Raster> {
    if raster.grid.is_aligned(grid) {
        return Ok(raster);
    }
    let data = align_to_grid(&raster.grid, raster.data.view(), grid, Resampling::Nearest)?;
    Raster::new(grid.clone(), raster.bands, raster.sample_type, raster.nodata, data)
}

/// Binary product layers on `grid`.
pub fn load_products(m: &DatasetManifest, grid: &RasterGrid) -> Result<ProductStack> {
    let mut layers = Vec::with_capacity(m.products.len());
    let mut ids = Vec::with_capacity(m.products.len());
    for p in &m.products {
        let mut rasters = Vec::with_capacity(p.paths.len());
        for path in &p.paths {
            rasters.push(on_grid(read_raster(m.resolve(path), &[])?, grid)?);
        }
        let raster = if rasters.len() == 1 {
            rasters.pop().unwrap()
        } else {
            let dates: Vec<Array2<f64>> = rasters
                .iter()
                .map(|r| {
                    let mut b = r.band(0);
                    if let Some(nd) = r.nodata {
                        b.mapv_inplace(|v| if v == nd { f64::NAN } else { v });
                    }
                    b
                })
                .collect();
            let mode = temporal_mode(&dates, &p.mapping.nodata_class_ids)?;
            Raster::single_band(grid.clone(), "class", rasters[0].sample_type, None, mode)?
        };
        layers.push(binarize_raster(&raster, &p.mapping)?);
        ids.push(p.mapping.product_id.clone());
    }
    ProductStack::new(grid.clone(), layers, ids)
}

/// Binary reference {0, 1, 255} on `grid`, if the manifest names one.
pub fn load_reference(m: &DatasetManifest, grid: &RasterGrid) -> Result<Option<Array2<u8>>> {
    m.reference.as_ref().map(|p| read_binary(&m.resolve(p), grid)).transpose()
}

/// Reads a single-band binary raster; nodata and anything but 0/1 become
/// IGNORE.
pub fn read_binary(path: &Path, grid: &RasterGrid) -> Result<Array2<u8>> {
    let r = on_grid(read_raster(path, &[])?, grid)?;
    let valid = r.validity();
    Ok(Array2::from_shape_fn(r.band(0).dim(), |(i, j)| match r.data[[i, j, 0]] {
        v if valid[[i, j]] && v == 0.0 => 0,
        v if valid[[i, j]] && v == 1.0 => 1,
        _ => IGNORE,
    }))
}

pub struct Fusion {
    pub stack: ProductStack,
    pub mask: QualityMask,
    pub labels: FusedLabels,
    pub stats: FusionStats,
}

pub fn fuse(m: &DatasetManifest, grid: &RasterGrid) -> Result<Fusion> {
    let stack = load_products(m, grid)?;
    let (mask, labels) = rate_quality(&stack)?;
    let reference = load_reference(m, grid)?;
    let stats = fusion_stats(&mask, &labels, reference.as_ref())?;
    Ok(Fusion { stack, mask, labels, stats })
}

/// Training and validation patches with the statistics to normalize them.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchStore {
    pub grid: RasterGrid,
    pub norm: NormStats,
    pub train: Vec<PatchSample>,
    pub validation: Vec<PatchSample>,
    /// Fingerprint of the manifest the store was built from.
    pub source: String,
}

#[derive(Serialize, Deserialize)]
struct StoreMeta {
    grid: RasterGrid,
    norm: NormStats,
    source: String,
    period_labels: Vec<Vec<u32>>,
    tiles: Vec<TileIndex>,
    validation: Vec<bool>,
}

impl PatchStore {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut tensors = BTreeMap::new();
        let all: Vec<(&PatchSample, bool)> =
            self.train.iter().map(|p| (p, false)).chain(self.validation.iter().map(|p| (p, true))).collect();
        for (i, (p, _)) in all.iter().enumerate() {
            let (t, c, h, w) = p.cube.dims();
            tensors.insert(format!("{i:05}.frames"), Tensor::from_vec(&[t, c, h, w], p.cube.frames.iter().copied().collect()));
            let flag = |v: &bool| if *v { 1.0 } else { 0.0 };
            tensors.insert(format!("{i:05}.validity"), Tensor::from_vec(&[t, h, w], p.cube.validity.iter().map(flag).collect()));
            tensors.insert(format!("{i:05}.mask"), Tensor::from_vec(&[h, w], p.quality_mask.iter().map(|&v| v as f64).collect()));
            tensors.insert(format!("{i:05}.labels"), Tensor::from_vec(&[h, w], p.labels.iter().map(|&v| v as f64).collect()));
        }
        let meta = StoreMeta {
            grid: self.grid.clone(),
            norm: self.norm.clone(),
            source: self.source.clone(),
            period_labels: all.iter().map(|(p, _)| p.cube.period_labels.clone()).collect(),
            tiles: all.iter().map(|(p, _)| p.tile).collect(),
            validation: all.iter().map(|(_, v)| *v).collect(),
        };
        Archive { kind: "patches".into(), meta: serde_json::to_value(meta)?, tensors }.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let a = Archive::read(path)?;
        let bad = |reason: String| Error::UnreadableFormat { path: path.to_path_buf(), reason };
        if a.kind != "patches" {
            return Err(bad(format!("holds a {:?} archive, not patches", a.kind)));
        }
        let meta: StoreMeta = serde_json::from_value(a.meta).map_err(|e| bad(e.to_string()))?;
        let get = |name: String| a.tensors.get(&name).ok_or_else(|| bad(format!("missing tensor {name}")));
        let mut store = PatchStore { grid: meta.grid, norm: meta.norm, train: Vec::new(), validation: Vec::new(), source: meta.source };
        for (i, tile) in meta.tiles.iter().enumerate() {
            let frames = get(format!("{i:05}.frames"))?;
            let sh = frames.shape();
            if sh.len() != 4 {
                return Err(bad(format!("patch {i} frames have shape {sh:?}")));
            }
            let (t, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
            let shape_err = |e: ndarray::ShapeError| bad(e.to_string());
            let frames = ndarray::Array4::from_shape_vec((t, c, h, w), frames.data().to_vec()).map_err(shape_err)?;
            let validity = Array3::from_shape_vec((t, h, w), get(format!("{i:05}.validity"))?.data().iter().map(|&v| v != 0.0).collect())
                .map_err(shape_err)?;
            let to_u8 = |t: &Tensor| Array2::from_shape_vec((h, w), t.data().iter().map(|&v| v as u8).collect());
            let quality_mask = to_u8(get(format!("{i:05}.mask"))?).map_err(shape_err)?;
            let labels = to_u8(get(format!("{i:05}.labels"))?).map_err(shape_err)?;
            let labels_for = meta.period_labels.get(i).cloned().ok_or_else(|| bad("missing period labels".into()))?;
            let cube = SitsCube::new(frames, labels_for, validity)?;
            let patch = PatchSample { cube, quality_mask, labels, tile: *tile };
            if meta.validation.get(i).copied().unwrap_or(false) {
                store.validation.push(patch);
            } else {
                store.train.push(patch);
            }
        }
        Ok(store)
    }
}

/// Stable fingerprint of a document's bytes (FNV-1a).
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Where the patch store for a manifest lives: `$CROPLANDWS_CACHE` when set,
/// otherwise `.cache` next to the manifest.
pub fn store_path(m: &DatasetManifest) -> PathBuf {
    let dir = std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| m.root.join(".cache"));
    dir.join(format!("{}.patches", m.name))
}

fn in_region(region: Option<&Region>, t: &TileIndex) -> bool {
    region.is_none_or(|r| r.contains(t))
}

/// Cuts train/validation patches. A tile belongs to a split when it lies
/// fully inside that split's region; without a train region every tile not
/// used for validation trains.
pub fn prepare(m: &DatasetManifest, source: String) -> Result<PatchStore> {
    let (grid, mut cube) = build_cube(m)?;
    if cube.dims().1 != m.bands.len() {
        return Err(Error::Shape(format!("cube has {} channels for {} bands", cube.dims().1, m.bands.len())));
    }
    let fusion = fuse(m, &grid)?;
    let plan = tile_plan(&grid, m.patch_size, m.stride)?;
    let (val_tiles, train_tiles): (Vec<TileIndex>, Vec<TileIndex>) = match &m.validation_region {
        Some(v) => plan.iter().partition(|t| v.contains(t)),
        None => (Vec::new(), plan.clone()),
    };
    let train_tiles: Vec<TileIndex> = train_tiles.into_iter().filter(|t| in_region(m.train_region.as_ref(), t)).collect();
    if train_tiles.is_empty() {
        return Err(Error::Config("no training tile lies inside the train region".into()));
    }
    let validation = build_patches(&cube, &fusion.mask, &fusion.labels, &val_tiles)?;
    if let Some(tc) = &m.train_corruption {
        cube = corrupt_cube(&cube, tc.spatial_rate, tc.temporal_rate, tc.seed)?;
    }
    let train = build_patches(&cube, &fusion.mask, &fusion.labels, &train_tiles)?;
    let norm = match &m.norm {
        Some(n) => n.clone(),
        None => NormStats::from_cubes(train.iter().map(|p| &p.cube))?,
    };
    Ok(PatchStore { grid, norm, train, validation, source })
}

/// Loads the cached store when it was built from the same manifest text,
/// otherwise prepares and caches a fresh one.
pub fn prepare_cached(m: &DatasetManifest, manifest_text: &str) -> Result<(PatchStore, PathBuf, bool)> {
    let source = fingerprint(manifest_text.as_bytes());
    let path = store_path(m);
    if path.exists() {
        if let Ok(store) = PatchStore::load(&path) {
            if store.source == source {
                return Ok((store, path, true));
            }
        }
    }
    let store = prepare(m, source)?;
    store.save(&path)?;
    Ok((store, path, false))
}

/// Crops `a` to a region; `None` keeps everything.
pub fn crop<T: Clone>(a: &Array2<T>, region: Option<&Region>) -> Array2<T> {
    match region {
        None => a.clone(),
        Some(r) => a.slice(s![r.row0..r.row0 + r.rows, r.col0..r.col0 + r.cols]).to_owned(),
    }
}

/// Ensures a region fits the grid.
pub fn check_region(r: &Region, grid: &RasterGrid) -> Result<()> {
    if r.rows == 0 || r.cols == 0 || r.row0 + r.rows > grid.height || r.col0 + r.cols > grid.width {
        return Err(Error::Config(format!("region {r:?} does not fit the {}x{} grid", grid.height, grid.width)));
    }
    Ok(())
}

/// Frames of the cube inside a region.
pub fn crop_cube(cube: &SitsCube, region: Option<&Region>) -> SitsCube {
    match region {
        None => cube.clone(),
        Some(r) => cube.window(r.row0, r.col0, r.rows, r.cols),
    }
}

const BAND_NAMES: [&str; 10] = ["B2", "B3", "B4", "B8", "B5", "B6", "B7", "B8A", "B11", "B12"];
/// Cloud flag bit of the quality band written for synthetic scenes.
pub const SYNTH_CLOUD_BIT: u32 = 10;

/// Sentinel-2 style band names for `channels` reflectance channels.
pub fn band_names(channels: usize) -> Vec<String> {
    (0..channels).map(|c| BAND_NAMES.get(c).map_or_else(|| format!("C{c}"), |s| s.to_string())).collect()
}

/// Class codes of one synthetic product: the crop code and the code used
/// for grass, forest and bare land.
fn product_codes(index: usize) -> (i64, [i64; 3]) {
    match index % 3 {
        0 => (40, [30, 10, 60]),
        1 => (5, [11, 2, 8]),
        _ => (4, [2, 1, 7]),
    }
}

/// Files written by [`write_synthetic_dataset`].
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: PathBuf,
    pub train_config: PathBuf,
    pub truth: PathBuf,
    pub dem: PathBuf,
}

/// Writes a synthetic world as an ordinary dataset: dated scenes, one class
/// raster per product, truth and DEM rasters, a manifest and a training
/// document sized for the world.
pub fn write_synthetic_dataset(world: &crate::synth::SyntheticWorld, dir: &Path) -> Result<SyntheticDataset> {
    use crate::manifest::{ProductEntry, QaRule, SceneEntry, TrainDocument};
    use crate::model::ModelConfig;
    use crate::raster::{write_raster, SampleType};
    use crate::fusion::ClassMapping;
    use crate::train::TrainConfig;

    for sub in ["scenes", "products"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let cfg = &world.config;
    let grid = &world.grid;
    let names = band_names(cfg.channels);
    let cloudy = world.scenes.iter().any(|s| s.cloud_mask.iter().any(|&c| c));

    let mut scenes = Vec::with_capacity(world.scenes.len());
    for (i, s) in world.scenes.iter().enumerate() {
        let rel = PathBuf::from(format!("scenes/{:02}_{}.tif", i, s.timestamp.format("%Y%m%d")));
        let (h, w, c) = s.bands.dim();
        let mut bands = names.clone();
        let mut data = s.bands.clone();
        if cloudy {
            bands.push("QA".into());
            let flag = (1u32 << SYNTH_CLOUD_BIT) as f64;
            let qa = s.cloud_mask.mapv(|m| if m { flag } else { 0.0 });
            data = ndarray::concatenate(Axis(2), &[data.view(), qa.view().insert_axis(Axis(2))])
                .map_err(|e| Error::Shape(e.to_string()))?;
        }
        debug_assert_eq!((h, w, c), (grid.height, grid.width, cfg.channels));
        write_raster(dir.join(&rel), &Raster::new(grid.clone(), bands, SampleType::F32, None, data)?)?;
        scenes.push(SceneEntry { date: s.timestamp, path: rel });
    }

    let mut products = Vec::with_capacity(world.products.len());
    for (i, layer) in world.products.iter().enumerate() {
        let (crop, others) = product_codes(i);
        let codes = Array2::from_shape_fn(layer.dim(), |(r, c)| {
            if layer[[r, c]] == 1 {
                return crop as f64;
            }
            let lc = world.land_cover[[r, c]] as usize;
            // Crop pixels a product calls non-crop are labelled as grass.
            others[lc.saturating_sub(1).min(2)] as f64
        });
        let rel = PathBuf::from(format!("products/product{i}.tif"));
        write_raster(dir.join(&rel), &Raster::single_band(grid.clone(), "class", SampleType::U8, None, codes)?)?;
        let mapping = ClassMapping::new(format!("product{i}"), [crop]).with_nodata([0]).strict(others);
        products.push(ProductEntry { mapping, paths: vec![rel] });
    }

    let truth = dir.join("truth.tif");
    write_raster(&truth, &Raster::single_band(grid.clone(), "cropland", SampleType::U8, Some(255.0), world.truth.mapv(f64::from))?)?;
    let dem = dir.join("dem.tif");
    write_raster(&dem, &Raster::single_band(grid.clone(), "elevation", SampleType::F32, None, world.dem.clone())?)?;

    let n = cfg.size;
    let patch = (n / 4).clamp(8, 64) / 8 * 8;
    let quarter = n / 4 / patch * patch;
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", cfg.seed),
        bands: names,
        qa: cloudy.then(|| QaRule { band: "QA".into(), cloud_bits: vec![SYNTH_CLOUD_BIT] }),
        max_cloud: 1.0,
        period: crate::sits::Period::Monthly,
        scenes,
        products,
        reference: Some("truth.tif".into()),
        dem: Some("dem.tif".into()),
        norm: None,
        patch_size: patch,
        stride: patch,
        map_stride: Some(patch / 2),
        train_region: None,
        validation_region: Some(Region { row0: n - quarter, col0: 0, rows: quarter, cols: n }),
        train_corruption: None,
        root: PathBuf::new(),
    };
    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let doc = TrainDocument {
        model: ModelConfig {
            widths: vec![8, 16, 32],
            input_channels: cfg.channels,
            d_model: 32,
            init_seed: cfg.seed,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 30,
            batch_size: 4,
            decay_epoch: 20,
            seed: cfg.seed,
            ..TrainConfig::default()
        },
    };
    let train_path = dir.join("train.toml");
    let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&train_path, text).map_err(|e| Error::io(&train_path, e))?;
    Ok(SyntheticDataset { manifest: manifest_path, train_config: train_path, truth, dem })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldConfig};

    fn small_world(seed: u64) -> (crate::synth::SyntheticWorld, SitsCube) {
        generate_world(&WorldConfig { size: 64, seed, ..WorldConfig::default() }).unwrap()
    }

    #[test]
    fn disk_round_trip_reproduces_the_world() {
        let dir = tempfile::tempdir().unwrap();
        let (world, cube) = small_world(3);
        let files = write_synthetic_dataset(&world, dir.path()).unwrap();
        let m = DatasetManifest::load(&files.manifest).unwrap();
        let (grid, disk_cube) = build_cube(&m).unwrap();
        assert_eq!(grid, world.grid);
        assert_eq!(disk_cube.period_labels, cube.period_labels);
        assert_eq!(disk_cube.validity, cube.validity);
        // Scenes are stored as 32-bit floats.
        let worst = disk_cube.frames.iter().zip(&cube.frames).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");

        let fusion = fuse(&m, &grid).unwrap();
        let (mask, labels) = rate_quality(&world.product_stack().unwrap()).unwrap();
        assert_eq!(fusion.mask.mask, mask.mask);
        assert_eq!(fusion.labels.labels, labels.labels);
        assert!(fusion.stats.label_avg_f1.is_some());
    }

    #[test]
    fn prepare_splits_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let (world, _) = small_world(4);
        let files = write_synthetic_dataset(&world, dir.path()).unwrap();
        let text = std::fs::read_to_string(&files.manifest).unwrap();
        let m = DatasetManifest::load(&files.manifest).unwrap();
        // 64x64 world: 16-pixel patches, bottom 16 rows validate.
        let (store, path, hit) = prepare_cached(&m, &text).unwrap();
        assert!(!hit);
        assert_eq!((store.train.len(), store.validation.len()), (12, 4));
        assert!(store.validation.iter().all(|p| p.tile.row0 == 48));
        assert_eq!(PatchStore::load(&path).unwrap(), store);
        let (again, _, hit) = prepare_cached(&m, &text).unwrap();
        assert!(hit);
        assert_eq!(again, store);
        let (_, _, hit) = prepare_cached(&m, &format!("{text}\n# edited\n")).unwrap();
        assert!(!hit);
    }

    #[test]
    fn multi_date_products_use_the_mode() {
        let dir = tempfile::tempdir().unwrap();
        let (world, _) = small_world(5);
        let files = write_synthetic_dataset(&world, dir.path()).unwrap();
        let mut m = DatasetManifest::load(&files.manifest).unwrap();
        // Two copies of product0 and one of product1: the mode is product0.
        let p1 = m.products[1].paths[0].clone();
        let p0 = m.products[0].paths[0].clone();
        m.products[0].paths = vec![p0.clone(), p1, p0];
        m.products[0].mapping.cropland_class_ids.insert(5);
        m.products[0].mapping.strict = false;
        let stack = load_products(&m, &world.grid).unwrap();
        assert_eq!(stack.layers[0], world.products[0]);
    }

    #[test]
    fn fingerprint_is_stable() {
        assert_eq!(fingerprint(b""), "cbf29ce484222325");
        assert_ne!(fingerprint(b"a"), fingerprint(b"b"));
    }
}
