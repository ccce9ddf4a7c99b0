//! Georeferenced rasters: GeoTIFF I/O, grid alignment, tiling and mosaicking.
//!
//! In-memory multi-band rasters are `H × W × B` arrays of `f64`; every
//! supported on-disk sample type is exactly representable, so integer
//! rasters survive a read/write round trip bit for bit. Probability stacks
//! (tiles and mosaics) are channel-first, `K × H × W`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::TiffEncoder;
use tiff::tags::{PhotometricInterpretation, PlanarConfiguration, SampleFormat, Tag};

use crate::error::{Error, Result};

/// Placement of a raster in a projected coordinate reference system.
///
/// `origin` is the outer corner of the top-left pixel; rows advance towards
/// decreasing y.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterGrid {
    pub width: usize,
    pub height: usize,
    pub origin: (f64, f64),
    pub pixel_size: f64,
    pub crs: String,
}

impl RasterGrid {
    pub fn new(
        width: usize,
        height: usize,
        origin: (f64, f64),
        pixel_size: f64,
        crs: impl Into<String>,
    ) -> Result<Self> {
        let grid = Self { width, height, origin, pixel_size, crs: crs.into() };
        grid.validate()?;
        Ok(grid)
    }

    /// A unit-pixel grid anchored at the origin, for synthetic data and tests.
    pub fn local(width: usize, height: usize) -> Self {
        Self { width, height, origin: (0.0, height as f64), pixel_size: 1.0, crs: "LOCAL".into() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid must be non-empty, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.pixel_size > 0.0) || !self.pixel_size.is_finite() {
            return Err(Error::InvalidParameter(format!("pixel size {} must be positive", self.pixel_size)));
        }
        Ok(())
    }

    /// Aligned grids agree on every field.
    pub fn is_aligned(&self, other: &RasterGrid) -> bool {
        self == other
    }

    pub fn ensure_aligned(&self, other: &RasterGrid, what: &str) -> Result<()> {
        if self.is_aligned(other) {
            Ok(())
        } else {
            Err(Error::Misaligned(format!("{what}: {self:?} vs {other:?}")))
        }
    }

    /// The sub-grid covered by a pixel window.
    pub fn window(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> RasterGrid {
        RasterGrid {
            width: cols,
            height: rows,
            origin: (
                self.origin.0 + col0 as f64 * self.pixel_size,
                self.origin.1 - row0 as f64 * self.pixel_size,
            ),
            pixel_size: self.pixel_size,
            crs: self.crs.clone(),
        }
    }

    fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin.0 + (col as f64 + 0.5) * self.pixel_size,
            self.origin.1 - (row as f64 + 0.5) * self.pixel_size,
        )
    }

    /// Fractional (row, col) of a map coordinate.
    fn locate(&self, x: f64, y: f64) -> (f64, f64) {
        ((self.origin.1 - y) / self.pixel_size, (x - self.origin.0) / self.pixel_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleType {
    U8,
    U16,
    I16,
    U32,
    I32,
    F32,
    F64,
}

impl SampleType {
    fn bits(self) -> u16 {
        match self {
            SampleType::U8 => 8,
            SampleType::U16 | SampleType::I16 => 16,
            SampleType::U32 | SampleType::I32 | SampleType::F32 => 32,
            SampleType::F64 => 64,
        }
    }

    fn format(self) -> SampleFormat {
        match self {
            SampleType::U8 | SampleType::U16 | SampleType::U32 => SampleFormat::Uint,
            SampleType::I16 | SampleType::I32 => SampleFormat::Int,
            SampleType::F32 | SampleType::F64 => SampleFormat::IEEEFP,
        }
    }
}

/// A multi-band raster held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub grid: RasterGrid,
    pub bands: Vec<String>,
    pub sample_type: SampleType,
    pub nodata: Option<f64>,
    /// `H × W × B`
    pub data: Array3<f64>,
}

impl Raster {
    pub fn new(
        grid: RasterGrid,
        bands: Vec<String>,
        sample_type: SampleType,
        nodata: Option<f64>,
        data: Array3<f64>,
    ) -> Result<Self> {
        grid.validate()?;
        let (h, w, b) = data.dim();
        if (h, w) != (grid.height, grid.width) || b != bands.len() {
            return Err(Error::Shape(format!(
                "raster data {h}x{w}x{b} does not match grid {}x{} with {} bands",
                grid.height,
                grid.width,
                bands.len()
            )));
        }
        Ok(Self { grid, bands, sample_type, nodata, data })
    }

    /// A single-band raster from an `H × W` array.
    pub fn single_band(
        grid: RasterGrid,
        name: &str,
        sample_type: SampleType,
        nodata: Option<f64>,
        data: Array2<f64>,
    ) -> Result<Self> {
        let data = data.insert_axis(Axis(2));
        Self::new(grid, vec![name.to_string()], sample_type, nodata, data)
    }

    pub fn band(&self, index: usize) -> Array2<f64> {
        self.data.index_axis(Axis(2), index).to_owned()
    }

    /// Pixel validity: false where any band is nodata or NaN.
    pub fn validity(&self) -> Array2<bool> {
        let (h, w, _) = self.data.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            self.data
                .slice(s![r, c, ..])
                .iter()
                .all(|&v| !v.is_nan() && self.nodata.is_none_or(|nd| v != nd))
        })
    }
}

const GDAL_METADATA: u16 = 42112;
const GEO_KEY_MODEL_TYPE: u16 = 1024;
const GEO_KEY_RASTER_TYPE: u16 = 1025;
const GEO_KEY_CITATION: u16 = 1026;
const GEO_KEY_GEOGRAPHIC_TYPE: u16 = 2048;
const GEO_KEY_PROJECTED_TYPE: u16 = 3072;
const TILE_SIDE: usize = 256;

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableFormat { path: path.to_path_buf(), reason: reason.to_string() }
}

fn epsg_code(crs: &str) -> Option<u16> {
    crs.strip_prefix("EPSG:").and_then(|c| c.parse().ok())
}

/// Writes a tiled, uncompressed GeoTIFF.
pub fn write_raster(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = TiffEncoder::new(BufWriter::new(file))?;
    let mut dir = encoder.image_directory()?;

    let (h, w, b) = raster.data.dim();
    let tile = TILE_SIDE.min(h.max(w).div_ceil(16) * 16);
    let tiles_across = w.div_ceil(tile);
    let tiles_down = h.div_ceil(tile);
    let mut offsets = Vec::with_capacity(tiles_across * tiles_down);
    let mut counts = Vec::with_capacity(tiles_across * tiles_down);
    let fill = raster.nodata.unwrap_or(0.0);
    for tr in 0..tiles_down {
        for tc in 0..tiles_across {
            let mut samples = Vec::with_capacity(tile * tile * b);
            for r in tr * tile..(tr + 1) * tile {
                for c in tc * tile..(tc + 1) * tile {
                    for k in 0..b {
                        samples.push(if r < h && c < w { raster.data[[r, c, k]] } else { fill });
                    }
                }
            }
            let (offset, bytes) = write_samples(&mut dir, raster.sample_type, &samples)?;
            offsets.push(offset as u32);
            counts.push(bytes as u32);
        }
    }

    dir.write_tag(Tag::ImageWidth, w as u32)?;
    dir.write_tag(Tag::ImageLength, h as u32)?;
    dir.write_tag(Tag::BitsPerSample, &vec![raster.sample_type.bits(); b][..])?;
    dir.write_tag(Tag::Compression, 1u16)?;
    dir.write_tag(Tag::PhotometricInterpretation, PhotometricInterpretation::BlackIsZero)?;
    dir.write_tag(Tag::SamplesPerPixel, b as u16)?;
    dir.write_tag(Tag::PlanarConfiguration, PlanarConfiguration::Chunky)?;
    if b > 1 {
        dir.write_tag(Tag::ExtraSamples, &vec![0u16; b - 1][..])?;
    }
    dir.write_tag(Tag::TileWidth, tile as u32)?;
    dir.write_tag(Tag::TileLength, tile as u32)?;
    dir.write_tag(Tag::TileOffsets, &offsets[..])?;
    dir.write_tag(Tag::TileByteCounts, &counts[..])?;
    dir.write_tag(Tag::SampleFormat, &vec![raster.sample_type.format(); b][..])?;

    let g = &raster.grid;
    dir.write_tag(Tag::ModelPixelScaleTag, &[g.pixel_size, g.pixel_size, 0.0][..])?;
    dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, g.origin.0, g.origin.1, 0.0][..])?;
    let citation = format!("{}|", g.crs);
    let mut keys: Vec<u16> = vec![1, 1, 0, 0];
    let mut push_key = |id: u16, loc: u16, count: u16, value: u16| {
        keys.extend_from_slice(&[id, loc, count, value]);
        keys[3] += 1;
    };
    match epsg_code(&g.crs) {
        Some(4326) => {
            push_key(GEO_KEY_MODEL_TYPE, 0, 1, 2);
            push_key(GEO_KEY_RASTER_TYPE, 0, 1, 1);
            push_key(GEO_KEY_CITATION, Tag::GeoAsciiParamsTag.to_u16(), citation.len() as u16, 0);
            push_key(GEO_KEY_GEOGRAPHIC_TYPE, 0, 1, 4326);
        }
        Some(code) => {
            push_key(GEO_KEY_MODEL_TYPE, 0, 1, 1);
            push_key(GEO_KEY_RASTER_TYPE, 0, 1, 1);
            push_key(GEO_KEY_CITATION, Tag::GeoAsciiParamsTag.to_u16(), citation.len() as u16, 0);
            push_key(GEO_KEY_PROJECTED_TYPE, 0, 1, code);
        }
        None => {
            push_key(GEO_KEY_MODEL_TYPE, 0, 1, 32767);
            push_key(GEO_KEY_RASTER_TYPE, 0, 1, 1);
            push_key(GEO_KEY_CITATION, Tag::GeoAsciiParamsTag.to_u16(), citation.len() as u16, 0);
        }
    }
    dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])?;
    dir.write_tag(Tag::GeoAsciiParamsTag, citation.as_str())?;
    if let Some(nd) = raster.nodata {
        dir.write_tag(Tag::GdalNodata, format_nodata(nd).as_str())?;
    }
    let mut meta = String::from("<GDALMetadata>");
    for (i, name) in raster.bands.iter().enumerate() {
        meta.push_str(&format!(
            "<Item name=\"DESCRIPTION\" sample=\"{i}\" role=\"description\">{}</Item>",
            xml_escape(name)
        ));
    }
    meta.push_str("</GDALMetadata>");
    dir.write_tag(Tag::Unknown(GDAL_METADATA), meta.as_str())?;
    dir.finish()?;
    Ok(())
}

fn format_nodata(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:?}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn xml_unescape(s: &str) -> String {
    s.replace("&lt;", "<").replace("&gt;", ">").replace("&quot;", "\"").replace("&amp;", "&")
}

fn write_samples<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    ty: SampleType,
    samples: &[f64],
) -> Result<(u64, usize)> {
    let offset = match ty {
        SampleType::U8 => dir.write_data(&samples.iter().map(|&v| v as u8).collect::<Vec<_>>()[..])?,
        SampleType::U16 => dir.write_data(&samples.iter().map(|&v| v as u16).collect::<Vec<_>>()[..])?,
        SampleType::I16 => dir.write_data(&samples.iter().map(|&v| v as i16).collect::<Vec<_>>()[..])?,
        SampleType::U32 => dir.write_data(&samples.iter().map(|&v| v as u32).collect::<Vec<_>>()[..])?,
        SampleType::I32 => dir.write_data(&samples.iter().map(|&v| v as i32).collect::<Vec<_>>()[..])?,
        SampleType::F32 => dir.write_data(&samples.iter().map(|&v| v as f32).collect::<Vec<_>>()[..])?,
        SampleType::F64 => dir.write_data(samples)?,
    };
    Ok((offset, samples.len() * ty.bits() as usize / 8))
}

/// Reads a GeoTIFF. An empty `band_subset` selects every band, in file order.
pub fn read_raster(path: impl AsRef<Path>, band_subset: &[&str]) -> Result<Raster> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = Decoder::new(BufReader::new(file))
        .map_err(|e| unreadable(path, e))?
        .with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions().map_err(|e| unreadable(path, e))?;
    let (w, h) = (w as usize, h as usize);
    let samples = dec
        .find_tag_unsigned::<u16>(Tag::SamplesPerPixel)
        .map_err(|e| unreadable(path, e))?
        .unwrap_or(1) as usize;

    let scale = dec
        .find_tag(Tag::ModelPixelScaleTag)
        .map_err(|e| unreadable(path, e))?
        .ok_or_else(|| unreadable(path, "missing ModelPixelScale tag"))?
        .into_f64_vec()?;
    let tie = dec
        .find_tag(Tag::ModelTiepointTag)
        .map_err(|e| unreadable(path, e))?
        .ok_or_else(|| unreadable(path, "missing ModelTiepoint tag"))?
        .into_f64_vec()?;
    if scale.len() < 2 || tie.len() < 6 || (scale[0] - scale[1]).abs() > 1e-9 * scale[0].abs() {
        return Err(unreadable(path, "only square, north-up pixels are supported"));
    }
    let pixel_size = scale[0];
    let origin = (tie[3] - tie[0] * pixel_size, tie[4] + tie[1] * pixel_size);
    let crs = read_crs(&mut dec).map_err(|e| unreadable(path, e))?;
    let nodata = match dec.find_tag(Tag::GdalNodata).map_err(|e| unreadable(path, e))? {
        Some(v) => {
            let s = v.into_string()?;
            let s = s.trim_matches(char::from(0)).trim();
            Some(s.parse::<f64>().map_err(|_| unreadable(path, format!("bad nodata {s:?}")))?)
        }
        None => None,
    };
    let mut names: Vec<String> = (1..=samples).map(|i| format!("band_{i}")).collect();
    if let Some(v) = dec.find_tag(Tag::Unknown(GDAL_METADATA)).map_err(|e| unreadable(path, e))? {
        parse_band_descriptions(&v.into_string()?, &mut names);
    }

    let decoded = dec.read_image().map_err(|e| unreadable(path, e))?;
    let (values, sample_type): (Vec<f64>, SampleType) = match decoded {
        DecodingResult::U8(v) => (v.into_iter().map(f64::from).collect(), SampleType::U8),
        DecodingResult::U16(v) => (v.into_iter().map(f64::from).collect(), SampleType::U16),
        DecodingResult::I16(v) => (v.into_iter().map(f64::from).collect(), SampleType::I16),
        DecodingResult::U32(v) => (v.into_iter().map(f64::from).collect(), SampleType::U32),
        DecodingResult::I32(v) => (v.into_iter().map(f64::from).collect(), SampleType::I32),
        DecodingResult::F32(v) => (v.into_iter().map(f64::from).collect(), SampleType::F32),
        DecodingResult::F64(v) => (v, SampleType::F64),
        _ => return Err(unreadable(path, "unsupported sample type")),
    };
    if values.len() != h * w * samples {
        return Err(unreadable(path, "decoded sample count does not match dimensions"));
    }
    let all = Array3::from_shape_vec((h, w, samples), values).map_err(|e| unreadable(path, e))?;

    let indices: Vec<usize> = if band_subset.is_empty() {
        (0..samples).collect()
    } else {
        band_subset
            .iter()
            .map(|b| {
                names.iter().position(|n| n == b).ok_or_else(|| Error::BandAbsent {
                    band: b.to_string(),
                    available: names.clone(),
                })
            })
            .collect::<Result<_>>()?
    };
    let data = all.select(Axis(2), &indices);
    let bands = indices.iter().map(|&i| names[i].clone()).collect();
    let grid = RasterGrid { width: w, height: h, origin, pixel_size, crs };
    Raster::new(grid, bands, sample_type, nodata, data)
}

fn read_crs<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>) -> tiff::TiffResult<String> {
    let keys = match dec.find_tag(Tag::GeoKeyDirectoryTag)? {
        Some(v) => v.into_u16_vec()?,
        None => return Ok("LOCAL".into()),
    };
    let ascii = match dec.find_tag(Tag::GeoAsciiParamsTag)? {
        Some(v) => v.into_string()?,
        None => String::new(),
    };
    let mut code = None;
    let mut citation = None;
    for key in keys.chunks(4).skip(1) {
        if key.len() < 4 {
            break;
        }
        match key[0] {
            GEO_KEY_PROJECTED_TYPE | GEO_KEY_GEOGRAPHIC_TYPE if key[1] == 0 => code = Some(key[3]),
            GEO_KEY_CITATION if key[1] == Tag::GeoAsciiParamsTag.to_u16() => {
                let start = key[3] as usize;
                let end = (start + key[2] as usize).min(ascii.len());
                citation = ascii.get(start..end).map(|s| s.trim_end_matches('|').to_string());
            }
            _ => {}
        }
    }
    Ok(match (citation, code) {
        (Some(c), _) if !c.is_empty() => c,
        (_, Some(code)) => format!("EPSG:{code}"),
        _ => "LOCAL".into(),
    })
}

fn parse_band_descriptions(xml: &str, names: &mut [String]) {
    let mut rest = xml;
    while let Some(start) = rest.find("<Item") {
        rest = &rest[start..];
        let Some(close) = rest.find('>') else { break };
        let head = &rest[..close];
        let Some(end) = rest.find("</Item>") else { break };
        let body = &rest[close + 1..end];
        if head.contains("name=\"DESCRIPTION\"") {
            let sample = head
                .split("sample=\"")
                .nth(1)
                .and_then(|s| s.split('"').next())
                .and_then(|s| s.parse::<usize>().ok());
            if let Some(i) = sample.filter(|&i| i < names.len()) {
                names[i] = xml_unescape(body);
            }
        }
        rest = &rest[end + 7..];
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Nearest,
    Average,
}

/// Resamples a pre-projected `H × W × B` array onto `target`. Target pixels
/// that fall outside the source are NaN.
pub fn align_to_grid(
    source_grid: &RasterGrid,
    source: ArrayView3<'_, f64>,
    target: &RasterGrid,
    resampling: Resampling,
) -> Result<Array3<f64>> {
    if source_grid.crs != target.crs {
        return Err(Error::CrsMismatch {
            source_crs: source_grid.crs.clone(),
            target_crs: target.crs.clone(),
        });
    }
    let (sh, sw, bands) = source.dim();
    if (sh, sw) != (source_grid.height, source_grid.width) {
        return Err(Error::Shape(format!(
            "source array {sh}x{sw} does not match its grid {}x{}",
            source_grid.height, source_grid.width
        )));
    }
    let mut out = Array3::from_elem((target.height, target.width, bands), f64::NAN);
    let mut touched = false;
    let ratio = target.pixel_size / source_grid.pixel_size;
    for r in 0..target.height {
        for c in 0..target.width {
            let (x, y) = target.center(r, c);
            let (sr, sc) = source_grid.locate(x, y);
            if resampling == Resampling::Average && ratio > 1.0 + 1e-12 {
                let half = ratio / 2.0;
                let r0 = (sr - half).round().max(0.0) as usize;
                let r1 = ((sr + half).round().max(0.0) as usize).min(sh);
                let c0 = (sc - half).round().max(0.0) as usize;
                let c1 = ((sc + half).round().max(0.0) as usize).min(sw);
                if r0 >= r1 || c0 >= c1 {
                    continue;
                }
                touched = true;
                for k in 0..bands {
                    let (mut sum, mut n) = (0.0, 0usize);
                    for v in source.slice(s![r0..r1, c0..c1, k]).iter().filter(|v| !v.is_nan()) {
                        sum += v;
                        n += 1;
                    }
                    if n > 0 {
                        out[[r, c, k]] = sum / n as f64;
                    }
                }
            } else {
                if sr < 0.0 || sc < 0.0 || sr >= sh as f64 || sc >= sw as f64 {
                    continue;
                }
                touched = true;
                let (ir, ic) = (sr.floor() as usize, sc.floor() as usize);
                for k in 0..bands {
                    out[[r, c, k]] = source[[ir, ic, k]];
                }
            }
        }
    }
    if touched {
        Ok(out)
    } else {
        Err(Error::EmptyOverlap)
    }
}

/// One window of a sliding-window plan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TileIndex {
    pub tile_row: usize,
    pub tile_col: usize,
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
    pub stride: usize,
    /// Rows/cols missing from a full tile when the grid is smaller than the tile.
    pub pad_rows: usize,
    pub pad_cols: usize,
}

fn axis_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if tile >= len {
        return vec![0];
    }
    let mut starts = Vec::new();
    let mut p = 0;
    loop {
        if p + tile >= len {
            starts.push(len - tile);
            break;
        }
        starts.push(p);
        p += stride;
    }
    starts
}

/// Sliding windows of side `tile` moved by `stride`; the last window on each
/// axis is shifted inward so that it ends on the grid edge.
pub fn tile_plan(grid: &RasterGrid, tile: usize, stride: usize) -> Result<Vec<TileIndex>> {
    if tile == 0 || stride == 0 || stride > tile {
        return Err(Error::InvalidParameter(format!(
            "tile plan needs tile > 0 and 0 < stride <= tile (tile {tile}, stride {stride})"
        )));
    }
    grid.validate()?;
    let rows = axis_starts(grid.height, tile, stride);
    let cols = axis_starts(grid.width, tile, stride);
    let (tr, tc) = (tile.min(grid.height), tile.min(grid.width));
    let mut plan = Vec::with_capacity(rows.len() * cols.len());
    for (i, &row0) in rows.iter().enumerate() {
        for (j, &col0) in cols.iter().enumerate() {
            plan.push(TileIndex {
                tile_row: i,
                tile_col: j,
                row0,
                col0,
                rows: tr,
                cols: tc,
                stride,
                pad_rows: tile - tr,
                pad_cols: tile - tc,
            });
        }
    }
    Ok(plan)
}

/// Per-pixel mean of the probability vectors of every tile covering it.
///
/// Tile pixels with any non-finite channel count as nodata and are skipped;
/// pixels covered only by nodata come out NaN. Accumulation runs in window
/// order regardless of input order, so the result is bit-identical under
/// permutation of `tiles`.
pub fn mosaic_probabilistic(tiles: &[(TileIndex, Array3<f64>)], grid: &RasterGrid) -> Result<Array3<f64>> {
    let Some((_, first)) = tiles.first() else {
        return Err(Error::UncoveredPixel { row: 0, col: 0 });
    };
    let k = first.dim().0;
    if k < 2 {
        return Err(Error::Shape(format!("need at least 2 probability channels, got {k}")));
    }
    let mut order: Vec<usize> = (0..tiles.len()).collect();
    order.sort_by_key(|&i| (tiles[i].0.row0, tiles[i].0.col0, tiles[i].0.rows, tiles[i].0.cols, i));

    let (h, w) = (grid.height, grid.width);
    let mut sum = Array3::<f64>::zeros((k, h, w));
    let mut count = Array2::<u32>::zeros((h, w));
    let mut covered = Array2::<bool>::from_elem((h, w), false);
    for &i in &order {
        let (idx, probs) = &tiles[i];
        let (pk, pr, pc) = probs.dim();
        if pk != k {
            return Err(Error::Shape(format!("tile has {pk} channels, expected {k}")));
        }
        if pr < idx.rows || pc < idx.cols || idx.row0 + idx.rows > h || idx.col0 + idx.cols > w {
            return Err(Error::Shape(format!("tile {idx:?} does not fit the {h}x{w} grid")));
        }
        for r in 0..idx.rows {
            for c in 0..idx.cols {
                let (gr, gc) = (idx.row0 + r, idx.col0 + c);
                covered[[gr, gc]] = true;
                if (0..k).any(|ch| !probs[[ch, r, c]].is_finite()) {
                    continue;
                }
                for ch in 0..k {
                    sum[[ch, gr, gc]] += probs[[ch, r, c]];
                }
                count[[gr, gc]] += 1;
            }
        }
    }
    if let Some(((row, col), _)) = covered.indexed_iter().find(|(_, &c)| !c) {
        return Err(Error::UncoveredPixel { row, col });
    }
    for ((ch, r, c), v) in sum.indexed_iter_mut() {
        let n = count[[r, c]];
        *v = if n == 0 { f64::NAN } else { *v / n as f64 };
        let _ = ch;
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn grid(w: usize, h: usize) -> RasterGrid {
        RasterGrid::new(w, h, (500_000.0, 3_000_000.0), 10.0, "EPSG:32649").unwrap()
    }

    #[test]
    fn reads_constant_zero_raster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("zeros.tif");
        let r = Raster::single_band(grid(2, 2), "B1", SampleType::U8, None, Array2::zeros((2, 2))).unwrap();
        write_raster(&path, &r).unwrap();
        let back = read_raster(&path, &[]).unwrap();
        assert_eq!(back.band(0), array![[0.0, 0.0], [0.0, 0.0]]);
        assert!(back.validity().iter().all(|&v| v));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for ty in [SampleType::U16, SampleType::I16, SampleType::F32, SampleType::F64] {
            let data = Array3::from_shape_fn((19, 300, 3), |(r, c, b)| {
                let i = ((r * 300 + c) % 5000) as f64 + b as f64;
                match ty {
                    SampleType::I16 => -i,
                    SampleType::F32 => (i * 0.1) as f32 as f64,
                    SampleType::F64 => i * 0.123456789,
                    _ => i,
                }
            });
            let r = Raster::new(
                grid(300, 19),
                vec!["B2".into(), "B3".into(), "B8".into()],
                ty,
                Some(-9999.0),
                data,
            )
            .unwrap();
            let path = dir.path().join("rt.tif");
            write_raster(&path, &r).unwrap();
            let once = read_raster(&path, &[]).unwrap();
            assert_eq!(once, r, "{ty:?}");
            write_raster(&path, &once).unwrap();
            assert_eq!(read_raster(&path, &[]).unwrap(), r);
        }
    }

    #[test]
    fn nodata_pixels_are_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array2::from_elem((4, 4), 7.0);
        let holes = [(0, 0), (1, 3), (3, 2)];
        for &(r, c) in &holes {
            data[[r, c]] = 255.0;
        }
        let r = Raster::single_band(grid(4, 4), "cls", SampleType::U8, Some(255.0), data).unwrap();
        let path = dir.path().join("nd.tif");
        write_raster(&path, &r).unwrap();
        let v = read_raster(&path, &[]).unwrap().validity();
        assert_eq!(v.iter().filter(|&&x| !x).count(), holes.len());
        for &(r, c) in &holes {
            assert!(!v[[r, c]]);
        }
    }

    #[test]
    fn band_subset_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((3, 3, 2), |(r, c, b)| (r + c + 10 * b) as f64);
        let r = Raster::new(grid(3, 3), vec!["red".into(), "nir".into()], SampleType::U8, None, data).unwrap();
        let path = dir.path().join("b.tif");
        write_raster(&path, &r).unwrap();
        let nir = read_raster(&path, &["nir"]).unwrap();
        assert_eq!(nir.bands, vec!["nir"]);
        assert_eq!(nir.data[[2, 2, 0]], 14.0);
        assert!(matches!(read_raster(&path, &["swir"]), Err(Error::BandAbsent { .. })));
        assert!(matches!(read_raster(dir.path().join("nope.tif"), &[]), Err(Error::MissingFile(_))));
        let junk = dir.path().join("junk.tif");
        std::fs::write(&junk, b"not a tiff").unwrap();
        assert!(matches!(read_raster(&junk, &[]), Err(Error::UnreadableFormat { .. })));
    }

    #[test]
    fn georeferencing_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for crs in ["EPSG:32649", "EPSG:4326", "LOCAL"] {
            let g = RasterGrid::new(5, 4, (123.5, 456.25), 0.5, crs).unwrap();
            let r = Raster::single_band(g.clone(), "x", SampleType::F32, None, Array2::zeros((4, 5))).unwrap();
            let path = dir.path().join("g.tif");
            write_raster(&path, &r).unwrap();
            assert_eq!(read_raster(&path, &[]).unwrap().grid, g);
        }
    }

    #[test]
    fn identical_grids_align_to_identity() {
        let g = grid(3, 2);
        let src = Array3::from_shape_fn((2, 3, 1), |(r, c, _)| (r * 3 + c) as f64);
        for m in [Resampling::Nearest, Resampling::Average] {
            assert_eq!(align_to_grid(&g, src.view(), &g, m).unwrap(), src);
        }
    }

    #[test]
    fn nearest_upsample_repeats_blocks() {
        let src_grid = RasterGrid::new(2, 2, (0.0, 20.0), 10.0, "EPSG:3857").unwrap();
        let dst_grid = RasterGrid::new(4, 4, (0.0, 20.0), 5.0, "EPSG:3857").unwrap();
        let src = array![[1.0, 2.0], [3.0, 4.0]].insert_axis(Axis(2));
        let out = align_to_grid(&src_grid, src.view(), &dst_grid, Resampling::Nearest).unwrap();
        let want = array![
            [1.0, 1.0, 2.0, 2.0],
            [1.0, 1.0, 2.0, 2.0],
            [3.0, 3.0, 4.0, 4.0],
            [3.0, 3.0, 4.0, 4.0]
        ];
        assert_eq!(out.index_axis(Axis(2), 0), want);
    }

    #[test]
    fn average_downsample_of_checkerboard_is_half() {
        let src_grid = RasterGrid::new(8, 8, (0.0, 80.0), 10.0, "EPSG:3857").unwrap();
        let dst_grid = RasterGrid::new(4, 4, (0.0, 80.0), 20.0, "EPSG:3857").unwrap();
        let src = Array3::from_shape_fn((8, 8, 1), |(r, c, _)| ((r + c) % 2) as f64);
        let out = align_to_grid(&src_grid, src.view(), &dst_grid, Resampling::Average).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn alignment_errors() {
        let a = grid(4, 4);
        let mut b = a.clone();
        b.crs = "EPSG:4326".into();
        let src = Array3::zeros((4, 4, 1));
        assert!(matches!(align_to_grid(&a, src.view(), &b, Resampling::Nearest), Err(Error::CrsMismatch { .. })));
        let mut far = a.clone();
        far.origin.0 += 1e6;
        assert!(matches!(align_to_grid(&a, src.view(), &far, Resampling::Nearest), Err(Error::EmptyOverlap)));
    }

    #[test]
    fn tile_plan_examples() {
        let p = tile_plan(&RasterGrid::local(512, 512), 256, 128).unwrap();
        assert_eq!(p.len(), 9);
        let starts: Vec<usize> = p.iter().filter(|t| t.tile_row == 0).map(|t| t.col0).collect();
        assert_eq!(starts, vec![0, 128, 256]);

        assert_eq!(tile_plan(&RasterGrid::local(256, 256), 256, 128).unwrap().len(), 1);

        let p = tile_plan(&RasterGrid::local(300, 300), 256, 128).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.last().unwrap().row0, 44);
        assert_eq!(p.last().unwrap().col0, 44);
    }

    #[test]
    fn oversized_tile_gives_single_padded_window() {
        let p = tile_plan(&RasterGrid::local(100, 60), 256, 128).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].rows, p[0].cols, p[0].pad_rows, p[0].pad_cols), (60, 100, 196, 156));
        assert!(tile_plan(&RasterGrid::local(10, 10), 4, 5).is_err());
        assert!(tile_plan(&RasterGrid::local(10, 10), 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn tile_plan_covers_grid_within_bounds(
            w in 1usize..300, h in 1usize..300, tile in 1usize..80, frac in 0.01f64..1.0
        ) {
            let stride = ((tile as f64 * frac).ceil() as usize).clamp(1, tile);
            let g = RasterGrid::local(w, h);
            let plan = tile_plan(&g, tile, stride).unwrap();
            let mut hit = Array2::<bool>::from_elem((h, w), false);
            for t in &plan {
                prop_assert!(t.row0 + t.rows <= h && t.col0 + t.cols <= w);
                hit.slice_mut(s![t.row0..t.row0 + t.rows, t.col0..t.col0 + t.cols]).fill(true);
            }
            prop_assert!(hit.iter().all(|&b| b));
        }
    }

    fn const_tile(t: TileIndex, p: &[f64]) -> (TileIndex, Array3<f64>) {
        (t, Array3::from_shape_fn((p.len(), t.rows, t.cols), |(k, _, _)| p[k]))
    }

    #[test]
    fn mosaic_of_constants_is_constant() {
        let g = RasterGrid::local(300, 300);
        let tiles: Vec<_> = tile_plan(&g, 256, 128).unwrap().into_iter().map(|t| const_tile(t, &[0.3, 0.7])).collect();
        let m = mosaic_probabilistic(&tiles, &g).unwrap();
        assert!(m.index_axis(Axis(0), 0).iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(m.index_axis(Axis(0), 1).iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn mosaic_averages_two_tiles() {
        let g = RasterGrid::local(3, 2);
        let a = TileIndex { tile_row: 0, tile_col: 0, row0: 0, col0: 0, rows: 2, cols: 2, stride: 1, pad_rows: 0, pad_cols: 0 };
        let b = TileIndex { col0: 1, tile_col: 1, ..a };
        let m = mosaic_probabilistic(&[const_tile(a, &[1.0, 0.0]), const_tile(b, &[0.0, 1.0])], &g).unwrap();
        assert_eq!(m[[0, 0, 1]], 0.5);
        assert_eq!(m[[1, 1, 1]], 0.5);
        assert_eq!(m[[0, 0, 0]], 1.0);
        assert_eq!(m[[1, 0, 2]], 1.0);
    }

    #[test]
    fn mosaic_errors() {
        let g = RasterGrid::local(4, 4);
        let a = TileIndex { tile_row: 0, tile_col: 0, row0: 0, col0: 0, rows: 2, cols: 2, stride: 2, pad_rows: 0, pad_cols: 0 };
        assert!(matches!(
            mosaic_probabilistic(&[const_tile(a, &[0.5, 0.5])], &g),
            Err(Error::UncoveredPixel { .. })
        ));
        let b = TileIndex { row0: 2, ..a };
        assert!(matches!(
            mosaic_probabilistic(&[const_tile(a, &[0.5, 0.5]), const_tile(b, &[0.2, 0.3, 0.5])], &g),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mosaic_skips_nodata_tile_pixels() {
        let g = RasterGrid::local(2, 1);
        let a = TileIndex { tile_row: 0, tile_col: 0, row0: 0, col0: 0, rows: 1, cols: 2, stride: 1, pad_rows: 0, pad_cols: 0 };
        let mut t1 = Array3::from_elem((2, 1, 2), 0.5);
        t1[[0, 0, 0]] = f64::NAN;
        let t2 = Array3::from_shape_fn((2, 1, 2), |(k, _, _)| if k == 0 { 0.2 } else { 0.8 });
        let m = mosaic_probabilistic(&[(a, t1), (a, t2)], &g).unwrap();
        assert_eq!(m[[0, 0, 0]], 0.2);
        assert_eq!(m[[0, 0, 1]], 0.35);
    }
}
