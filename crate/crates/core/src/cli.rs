//! Command-line front end. Experiment parameters live in TOML documents;
//! flags only pick documents, paths and `--set key=value` overrides.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Array3};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::eval::{confusion, map_region, metrics, slope_stratify, stratified_report, EvalReport};
use crate::fusion::IGNORE;
use crate::manifest::{load_document, CorruptionDocument, DatasetManifest, Region, TrainDocument, WorldDocument};
use crate::model::ModelInput;
use crate::pipeline::{self, PatchStore};
use crate::raster::{read_raster, tile_plan, write_raster, Raster, RasterGrid, SampleType};
use crate::synth::{generate_world, robustness_grid};
use crate::train::{continue_train, train, TrainOutcome, ValidationSample};

#[derive(Debug, Parser)]
#[command(name = "croplandws", version, about = "Weakly supervised cropland mapping from image time series")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Override a document key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rate label quality across products and write fused labels.
    Fuse {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Composite scenes, cut patches and store them in the patch cache.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        /// Rebuild even when a matching store exists.
        #[arg(long)]
        force: bool,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Training document with `[model]` and `[train]` tables.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resume a checkpoint on another dataset (e.g. a later year).
    Continue {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliding-window inference over the whole scene grid.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a binary map against a reference.
    Eval {
        /// Binary map {0, 1, 255}.
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Elevation raster for a plain/hill/mountain breakdown.
        #[arg(long)]
        dem: Option<PathBuf>,
        /// Window `row0,col0,rows,cols` to score.
        #[arg(long, value_parser = parse_region)]
        region: Option<Region>,
        /// Write the report document here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint under a grid of cloud and frame-drop rates.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Corruption document (`spatial_rates`, `temporal_rates`, `seed`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        /// Window to score; defaults to the manifest's validation region.
        #[arg(long, value_parser = parse_region)]
        region: Option<Region>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset on disk.
    Synth {
        /// World document; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// synth, fuse, prepare, train, map and eval in one run. Overrides
    /// starting with `world.` go to the world document, the rest to the
    /// training document.
    Pipeline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_region(s: &str) -> std::result::Result<Region, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [row0, col0, rows, cols] => Ok(Region { row0, col0, rows, cols }),
        _ => Err("expected row0,col0,rows,cols".into()),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Fuse { manifest, out } => cmd_fuse(&DatasetManifest::load(&manifest)?, &out).map(|_| ()),
        Command::Prepare { manifest, force } => cmd_prepare(&manifest, force).map(|_| ()),
        Command::Train { manifest, config, overrides, out } => {
            let doc: TrainDocument = load_document(config.as_deref(), &overrides.set)?;
            cmd_train(&manifest, doc, None, &out).map(|_| ())
        }
        Command::Continue { checkpoint, manifest, config, overrides, out } => {
            let doc: TrainDocument = load_document(config.as_deref(), &overrides.set)?;
            let ck = Checkpoint::load(&checkpoint)?;
            cmd_train(&manifest, doc, Some(ck), &out).map(|_| ())
        }
        Command::Map { checkpoint, manifest, out } => {
            cmd_map(&Checkpoint::load(&checkpoint)?, &DatasetManifest::load(&manifest)?, &out).map(|_| ())
        }
        Command::Eval { map, reference, dem, region, out } => {
            cmd_eval(&map, &reference, dem.as_deref(), region, out.as_deref()).map(|_| ())
        }
        Command::Robustness { checkpoint, manifest, config, overrides, region, out } => {
            let cfg: CorruptionDocument = load_document(config.as_deref(), &overrides.set)?;
            cmd_robustness(&Checkpoint::load(&checkpoint)?, &DatasetManifest::load(&manifest)?, &cfg, region, &out)
        }
        Command::Synth { config, overrides, out } => {
            let world = world_document(config.as_deref(), &overrides.set)?;
            cmd_synth(&world, &out).map(|_| ())
        }
        Command::Pipeline { config, train_config, overrides, out } => {
            let (world_sets, train_sets): (Vec<String>, Vec<String>) =
                overrides.set.into_iter().partition(|s| s.trim_start().starts_with("world."));
            let world_sets: Vec<String> =
                world_sets.iter().map(|s| s.trim_start().trim_start_matches("world.").to_string()).collect();
            let world = world_document(config.as_deref(), &world_sets)?;
            cmd_pipeline(&world, train_config.as_deref(), &train_sets, &out)
        }
    }
}

fn world_document(path: Option<&Path>, sets: &[String]) -> Result<WorldDocument> {
    let world: WorldDocument = load_document(path, sets)?;
    world.validate()?;
    Ok(world)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn u8_raster(grid: &RasterGrid, name: &str, a: &Array2<u8>) -> Result<Raster> {
    Raster::single_band(grid.clone(), name, SampleType::U8, Some(IGNORE as f64), a.mapv(f64::from))
}

pub fn cmd_fuse(m: &DatasetManifest, out: &Path) -> Result<serde_json::Value> {
    create_dir(out)?;
    let grid = pipeline::scene_grid(m)?;
    let f = pipeline::fuse(m, &grid)?;
    write_raster(out.join("fused_labels.tif"), &u8_raster(&grid, "label", &f.labels.labels)?)?;
    write_raster(out.join("quality_mask.tif"), &u8_raster(&grid, "quality", &f.mask.mask)?)?;
    let record = json!({ "products": f.stack.product_ids, "stats": f.stats });
    write_json(&out.join("fusion_stats.json"), &record)?;
    println!(
        "fused {} products: {} of {} pixels high quality ({:.2}%){}",
        f.stack.product_ids.len(),
        f.stats.high_quality_pixels,
        f.stats.total_pixels,
        100.0 * f.stats.label_ratio,
        f.stats.label_avg_f1.map(|v| format!(", label Avg.F1 {v:.2}%")).unwrap_or_default()
    );
    Ok(record)
}

fn load_store(manifest_path: &Path, force: bool) -> Result<(DatasetManifest, PatchStore)> {
    let m = DatasetManifest::load(manifest_path)?;
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    if force {
        let _ = std::fs::remove_file(pipeline::store_path(&m));
    }
    let (store, path, hit) = pipeline::prepare_cached(&m, &text)?;
    eprintln!(
        "{} patch store {} ({} train, {} validation)",
        if hit { "reusing" } else { "wrote" },
        path.display(),
        store.train.len(),
        store.validation.len()
    );
    Ok((m, store))
}

pub fn cmd_prepare(manifest: &Path, force: bool) -> Result<PatchStore> {
    let (_, store) = load_store(manifest, force)?;
    println!("{} training and {} validation patches", store.train.len(), store.validation.len());
    Ok(store)
}

/// Validation inputs scored against the manifest reference, or against the
/// fused labels when there is none.
fn validation_samples(m: &DatasetManifest, store: &PatchStore, norm: &crate::sits::NormStats) -> Result<Vec<ValidationSample>> {
    let reference = pipeline::load_reference(m, &store.grid)?;
    store
        .validation
        .iter()
        .map(|p| {
            let t = p.tile;
            let r = match &reference {
                Some(r) => r.slice(ndarray::s![t.row0..t.row0 + t.rows, t.col0..t.col0 + t.cols]).to_owned(),
                None => p.labels.clone(),
            };
            Ok(ValidationSample { input: ModelInput::from_cube(&p.cube, norm)?, reference: r })
        })
        .collect()
}

pub fn cmd_train(manifest: &Path, mut doc: TrainDocument, resume: Option<Checkpoint>, out: &Path) -> Result<TrainOutcome> {
    create_dir(out)?;
    let (m, store) = load_store(manifest, false)?;
    if doc.train.checkpoint_dir.is_none() {
        doc.train.checkpoint_dir = Some(out.to_path_buf());
    }
    if doc.train.metrics_log.is_none() {
        doc.train.metrics_log = Some(out.join("metrics.jsonl"));
    }
    let outcome = match &resume {
        None => {
            if doc.model.input_channels != m.bands.len() {
                return Err(Error::Config(format!(
                    "model.input_channels is {} but the manifest lists {} bands",
                    doc.model.input_channels,
                    m.bands.len()
                )));
            }
            let val = validation_samples(&m, &store, &store.norm)?;
            train(&store.train, doc.model.clone(), Some(store.norm.clone()), &doc.train, Some(&val))?
        }
        Some(ck) => {
            let val = validation_samples(&m, &store, &ck.norm)?;
            continue_train(ck, &store.train, &doc.train, Some(&val))?
        }
    };
    let last = outcome.epochs.last();
    let summary = json!({
        "mode": if resume.is_some() { "continue" } else { "train" },
        "epochs": outcome.checkpoint.state.epoch,
        "steps": outcome.checkpoint.state.step,
        "train_patches": store.train.len(),
        "validation_patches": store.validation.len(),
        "final_loss": last.map(|e| e.mean_loss),
        "val_avg_f1": last.and_then(|e| e.val_avg_f1),
        "val_oa": last.and_then(|e| e.val_oa),
        "parameters": outcome.checkpoint.model.parameter_count(),
    });
    write_json(&out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} epochs ({} steps); checkpoint {}{}",
        outcome.epochs.len(),
        outcome.steps.len(),
        out.join("last.cws").display(),
        last.and_then(|e| e.val_avg_f1).map(|f| format!("; validation Avg.F1 {f:.2}%")).unwrap_or_default()
    );
    Ok(outcome)
}

pub fn cmd_map(ck: &Checkpoint, m: &DatasetManifest, out: &Path) -> Result<(Array3<f64>, Array2<u8>)> {
    create_dir(out)?;
    let (grid, cube) = pipeline::build_cube(m)?;
    let (t, c, _, _) = cube.dims();
    ck.ensure_compatible(c, t)?;
    let plan = tile_plan(&grid, m.patch_size, m.map_stride())?;
    let (probs, mut binary) = map_region(ck, &cube, &grid, &plan)?;
    for ((r, col), v) in binary.indexed_iter_mut() {
        if !probs[[1, r, col]].is_finite() {
            *v = IGNORE;
        }
    }
    let hw = probs.view().permuted_axes([1, 2, 0]).to_owned();
    let raster = Raster::new(grid.clone(), vec!["noncrop".into(), "crop".into()], SampleType::F32, None, hw)?;
    write_raster(out.join("probs.tif"), &raster)?;
    write_raster(out.join("map.tif"), &u8_raster(&grid, "cropland", &binary)?)?;
    let crop = binary.iter().filter(|&&v| v == 1).count();
    println!("mapped {} windows; {:.2}% cropland -> {}", plan.len(), 100.0 * crop as f64 / binary.len() as f64, out.display());
    Ok((probs, binary))
}

fn read_binary_on(path: &Path, grid: Option<&RasterGrid>) -> Result<(RasterGrid, Array2<u8>)> {
    let grid = match grid {
        Some(g) => g.clone(),
        None => read_raster(path, &[])?.grid,
    };
    let a = pipeline::read_binary(path, &grid)?;
    Ok((grid, a))
}

pub fn cmd_eval(
    map: &Path,
    reference: &Path,
    dem: Option<&Path>,
    region: Option<Region>,
    out: Option<&Path>,
) -> Result<(EvalReport, serde_json::Value)> {
    let (grid, pred) = read_binary_on(map, None)?;
    let (_, reference) = read_binary_on(reference, Some(&grid))?;
    if let Some(r) = &region {
        pipeline::check_region(r, &grid)?;
    }
    let pred = pipeline::crop(&pred, region.as_ref());
    let reference = pipeline::crop(&reference, region.as_ref());
    let valid = ndarray::Zip::from(&pred).and(&reference).map_collect(|&p, &r| p != IGNORE && r != IGNORE);
    let report = metrics(&confusion(&pred, &reference, &valid)?)?;
    let mut record = json!({ "pixels": report.confusion.total(), "report": report.to_record() });
    let mut text = report.render_table("Accuracy");
    if let Some(dem) = dem {
        let d = read_raster(dem, &[])?;
        let aligned = if d.grid.is_aligned(&grid) {
            d
        } else {
            let data = crate::raster::align_to_grid(&d.grid, d.data.view(), &grid, crate::raster::Resampling::Average)?;
            Raster::new(grid.clone(), d.bands.clone(), d.sample_type, d.nodata, data)?
        };
        let valid_dem = aligned.validity();
        let elev = ndarray::Zip::from(&aligned.band(0)).and(&valid_dem).map_collect(|&v, &ok| if ok { v } else { f64::NAN });
        let strata = slope_stratify(&elev, grid.pixel_size)?;
        let strata = crate::eval::TerrainStrata {
            slope: pipeline::crop(&strata.slope, region.as_ref()),
            classes: pipeline::crop(&strata.classes, region.as_ref()),
        };
        let by = stratified_report(&pred, &reference, &valid, &strata)?;
        let mut strata_rec = serde_json::Map::new();
        for (s, r) in &by {
            let name = serde_json::to_value(s)?.as_str().unwrap_or_default().to_string();
            text.push('\n');
            text.push_str(&r.render_table(&format!("Stratum: {name} ({} pixels)", r.confusion.total())));
            strata_rec.insert(name, json!({ "pixels": r.confusion.total(), "report": r.to_record() }));
        }
        record["strata"] = serde_json::Value::Object(strata_rec);
    }
    print!("{text}");
    if let Some(out) = out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_json(out, &record)?;
    }
    Ok((report, record))
}

pub fn cmd_robustness(
    ck: &Checkpoint,
    m: &DatasetManifest,
    cfg: &CorruptionDocument,
    region: Option<Region>,
    out: &Path,
) -> Result<()> {
    create_dir(out)?;
    let (grid, cube) = pipeline::build_cube(m)?;
    let (t, c, _, _) = cube.dims();
    ck.ensure_compatible(c, t)?;
    let reference = pipeline::load_reference(m, &grid)?
        .ok_or_else(|| Error::Config("robustness needs a reference map in the manifest".into()))?;
    let region = region.or(m.validation_region);
    if let Some(r) = &region {
        pipeline::check_region(r, &grid)?;
    }
    let sub_grid = match &region {
        Some(r) => grid.window(r.row0, r.col0, r.rows, r.cols),
        None => grid.clone(),
    };
    let cube = pipeline::crop_cube(&cube, region.as_ref());
    let reference = pipeline::crop(&reference, region.as_ref());
    let plan = tile_plan(&sub_grid, m.patch_size, m.map_stride())?;
    let g = robustness_grid(ck, &cube, &reference, &sub_grid, &plan, cfg)?;
    let table = g.render_heat_table();
    write_json(&out.join("robustness.json"), &json!({ "config": cfg, "cells": g.records() }))?;
    std::fs::write(out.join("robustness.txt"), &table).map_err(|e| Error::io(out, e))?;
    print!("{table}");
    Ok(())
}

pub fn cmd_synth(world: &WorldDocument, out: &Path) -> Result<pipeline::SyntheticDataset> {
    let (w, _) = generate_world(world)?;
    let files = pipeline::write_synthetic_dataset(&w, out)?;
    let crop = w.truth.iter().filter(|&&v| v == 1).count();
    println!(
        "synthetic world {}x{} ({} fields, {:.1}% cropland, {} scenes, {} products) -> {}",
        world.size,
        world.size,
        w.fields.len(),
        100.0 * crop as f64 / w.truth.len() as f64,
        w.scenes.len(),
        w.products.len(),
        files.manifest.display()
    );
    Ok(files)
}

pub fn cmd_pipeline(world: &WorldDocument, train_config: Option<&Path>, sets: &[String], out: &Path) -> Result<()> {
    let data = out.join("dataset");
    let files = cmd_synth(world, &data)?;
    let train_path = train_config.map(Path::to_path_buf).unwrap_or_else(|| files.train_config.clone());
    let doc: TrainDocument = load_document(Some(&train_path), sets)?;
    let m = DatasetManifest::load(&files.manifest)?;
    cmd_fuse(&m, &out.join("fusion"))?;
    let outcome = cmd_train(&files.manifest, doc, None, &out.join("model"))?;
    cmd_map(&outcome.checkpoint, &m, &out.join("map"))?;
    cmd_eval(
        &out.join("map").join("map.tif"),
        &files.truth,
        Some(&files.dem),
        m.validation_region,
        Some(&out.join("eval.json")),
    )?;
    Ok(())
}
