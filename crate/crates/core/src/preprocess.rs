//! Source-data preprocessing: canopy height models from point clouds,
//! composite stacking, stand rasterization, tiling, and the dataset split.

use crate::error::{Error, Result};
use crate::raster::{ClassMask, ClassScheme, GeoTransform, Raster, UNLABELED};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;

/// Height-normalized lidar return: x, y in world meters, z meters above
/// ground.
pub type Point3 = [f64; 3];

/// Development-stage merge applied when stands are rasterized: raw stage
/// codes {NF, I, II, III, IV, V} collapse to the five model classes, with
/// stages I and II sharing a class.
pub const STAGE_MERGE: [u8; 6] = [0, 1, 1, 2, 3, 4];

/// Inverse of [`STAGE_MERGE`]: representative raw stage code per class
/// (class "I-II" reports stage II).
pub const STAGE_UNMERGE: [u8; 5] = [0, 2, 3, 4, 5];

/// A delineated stand: an exterior ring, optional interior rings (holes),
/// and the raw development-stage code.
#[derive(Debug, Clone, PartialEq)]
pub struct StandPolygon {
    /// First ring is the exterior; all rings closed (first = last vertex).
    pub rings: Vec<Vec<(f64, f64)>>,
    /// Raw stage code 0..=5 before the I/II merge.
    pub class_id: u8,
}

impl StandPolygon {
    pub fn new(rings: Vec<Vec<(f64, f64)>>, class_id: u8) -> Result<Self> {
        if rings.is_empty() {
            return Err(Error::Geometry("polygon has no rings".into()));
        }
        for (i, ring) in rings.iter().enumerate() {
            if ring.len() < 4 {
                return Err(Error::Geometry(format!(
                    "ring {i} has {} vertices, need at least 4",
                    ring.len()
                )));
            }
            if ring.first() != ring.last() {
                return Err(Error::Geometry(format!(
                    "ring {i} is not closed: first {:?} != last {:?}",
                    ring.first().unwrap(),
                    ring.last().unwrap()
                )));
            }
        }
        if class_id as usize >= STAGE_MERGE.len() {
            return Err(Error::Encoding(format!(
                "stage code {class_id} out of range 0..{}",
                STAGE_MERGE.len()
            )));
        }
        Ok(Self { rings, class_id })
    }

    /// Bounding box (xmin, ymin, xmax, ymax) over all rings.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut bb = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for ring in &self.rings {
            for &(x, y) in ring {
                bb.0 = bb.0.min(x);
                bb.1 = bb.1.min(y);
                bb.2 = bb.2.max(x);
                bb.3 = bb.3.max(y);
            }
        }
        bb
    }

    /// Even-odd containment test over all rings, so interior rings punch
    /// holes.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let mut inside = false;
        for ring in &self.rings {
            for edge in ring.windows(2) {
                let (x1, y1) = edge[0];
                let (x2, y2) = edge[1];
                if (y1 > y) != (y2 > y) && x < (x2 - x1) * (y - y1) / (y2 - y1) + x1 {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Which partition a tile belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// One training tile: a normalized composite window, its one-hot mask, and
/// grid bookkeeping.
#[derive(Debug, Clone)]
pub struct Tile {
    pub tile_id: u64,
    pub grid_row: usize,
    pub grid_col: usize,
    pub composite: Raster,
    pub mask: ClassMask,
    pub split: Option<Split>,
}

/// The tiles produced from one scene, all the same pixel size.
#[derive(Debug, Clone)]
pub struct TileSet {
    pub tile_pixels: usize,
    pub tiles: Vec<Tile>,
}

impl TileSet {
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for t in &self.tiles {
            match t.split {
                Some(Split::Train) => counts.0 += 1,
                Some(Split::Val) => counts.1 += 1,
                Some(Split::Test) => counts.2 += 1,
                None => {}
            }
        }
        counts
    }

    pub fn tiles_in(&self, split: Split) -> Vec<&Tile> {
        self.tiles.iter().filter(|t| t.split == Some(split)).collect()
    }
}

/// Train/val/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitConfig {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl SplitConfig {
    pub fn new(fractions: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (a, b, c) = fractions;
        for f in [a, b, c] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!(
                    "split fraction {f} outside (0, 1)"
                )));
            }
        }
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions sum to {}, expected 1",
                a + b + c
            )));
        }
        Ok(Self { fractions, seed })
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: (0.70, 0.15, 0.15),
            seed: 0,
        }
    }
}

/// Parse ASCII XYZ point text: one "x y z" triple per line, '#' starts a
/// comment, blank lines ignored.
pub fn parse_xyz(text: &str) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let mut fields = line.split_whitespace();
        let Some(first) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        if rest.len() != 2 {
            return Err(Error::Format(format!(
                "line {}: expected \"x y z\", got {:?}",
                lineno + 1,
                raw
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| {
                Error::Format(format!("line {}: {:?} is not a number", lineno + 1, s))
            })?;
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "line {}: non-finite coordinate {s}",
                    lineno + 1
                )));
            }
            Ok(v)
        };
        points.push([parse(first)?, parse(rest[0])?, parse(rest[1])?]);
    }
    Ok(points)
}

/// Read an ASCII XYZ file.
pub fn read_xyz(path: &Path) -> Result<Vec<Point3>> {
    parse_xyz(&std::fs::read_to_string(path)?)
}

/// Render points back to XYZ text (deterministic).
pub fn xyz_to_string(points: &[Point3]) -> String {
    let mut out = String::with_capacity(points.len() * 24);
    for p in points {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    out
}

#[derive(Serialize, Deserialize)]
struct GeoJsonGeometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct GeoJsonFeature {
    #[serde(rename = "type")]
    kind: String,
    properties: serde_json::Map<String, serde_json::Value>,
    geometry: GeoJsonGeometry,
}

#[derive(Serialize, Deserialize)]
struct GeoJsonCollection {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<GeoJsonFeature>,
}

/// Parse a GeoJSON FeatureCollection of Polygon features whose integer
/// property "class" holds the raw stage code.
pub fn parse_stands_geojson(text: &str) -> Result<Vec<StandPolygon>> {
    let fc: GeoJsonCollection = serde_json::from_str(text)
        .map_err(|e| Error::Format(format!("invalid GeoJSON: {e}")))?;
    if fc.kind != "FeatureCollection" {
        return Err(Error::Format(format!(
            "expected FeatureCollection, got {:?}",
            fc.kind
        )));
    }
    let mut polygons = Vec::with_capacity(fc.features.len());
    for (i, feat) in fc.features.into_iter().enumerate() {
        if feat.geometry.kind != "Polygon" {
            return Err(Error::Format(format!(
                "feature {i}: geometry type {:?} is not Polygon",
                feat.geometry.kind
            )));
        }
        let class = feat
            .properties
            .get("class")
            .and_then(|v| v.as_i64())
            .ok_or_else(|| {
                Error::Format(format!("feature {i}: missing integer property \"class\""))
            })?;
        if !(0..=5).contains(&class) {
            return Err(Error::Encoding(format!(
                "feature {i}: stage code {class} out of range 0..=5"
            )));
        }
        let rings = feat
            .geometry
            .coordinates
            .into_iter()
            .map(|ring| ring.into_iter().map(|[x, y]| (x, y)).collect())
            .collect();
        polygons.push(StandPolygon::new(rings, class as u8)?);
    }
    Ok(polygons)
}

/// Read stand polygons from a GeoJSON file.
pub fn read_stands(path: &Path) -> Result<Vec<StandPolygon>> {
    parse_stands_geojson(&std::fs::read_to_string(path)?)
}

/// Render stand polygons as a GeoJSON FeatureCollection (deterministic).
pub fn stands_to_geojson_string(polygons: &[StandPolygon]) -> String {
    let features = polygons
        .iter()
        .map(|p| {
            let mut properties = serde_json::Map::new();
            properties.insert("class".into(), serde_json::Value::from(p.class_id));
            GeoJsonFeature {
                kind: "Feature".into(),
                properties,
                geometry: GeoJsonGeometry {
                    kind: "Polygon".into(),
                    coordinates: p
                        .rings
                        .iter()
                        .map(|ring| ring.iter().map(|&(x, y)| [x, y]).collect())
                        .collect(),
                },
            }
        })
        .collect();
    serde_json::to_string(&GeoJsonCollection {
        kind: "FeatureCollection".into(),
        features,
    })
    .expect("GeoJSON serialization cannot fail")
}

/// Build a canopy height model: per-cell maximum of point heights, one pass
/// of 3x3 mean hole-filling from occupied cells, remaining holes set to 0.
/// Heights clamp at 0 so the model is non-negative everywhere.
pub fn build_chm(
    cloud: &[Point3],
    grid: GeoTransform,
    width: usize,
    height: usize,
) -> Result<Raster> {
    if cloud.is_empty() {
        return Err(Error::Input("point cloud is empty".into()));
    }
    if width == 0 || height == 0 {
        return Err(Error::Dimension("CHM grid must be non-empty".into()));
    }
    let mut max_z = vec![f64::NEG_INFINITY; width * height];
    for p in cloud {
        if let Some((r, c)) = grid.cell_of(p[0], p[1], width, height) {
            let cell = &mut max_z[r * width + c];
            *cell = cell.max(p[2]);
        }
    }
    let occupied: Vec<bool> = max_z.iter().map(|&z| z > f64::NEG_INFINITY).collect();
    let mut out = vec![0f32; width * height];
    for r in 0..height {
        for c in 0..width {
            let i = r * width + c;
            if occupied[i] {
                out[i] = max_z[i].max(0.0) as f32;
                continue;
            }
            // hole: mean over occupied 3x3 neighbors
            let mut acc = 0f64;
            let mut n = 0u32;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nc < 0 || nr >= height as i64 || nc >= width as i64 {
                        continue;
                    }
                    let j = nr as usize * width + nc as usize;
                    if occupied[j] {
                        acc += max_z[j].max(0.0);
                        n += 1;
                    }
                }
            }
            out[i] = if n > 0 { (acc / n as f64) as f32 } else { 0.0 };
        }
    }
    Raster::new_f32(width, height, 1, grid, vec!["chm".into()], None, out)
}

/// Stack a 4-band spectral raster and a single-band CHM into the 5-band
/// composite [red, green, blue, nir, chm]. Values are copied verbatim
/// (u8 inputs widen to f32), so no resampling happens here.
pub fn stack_composite(spectral: &Raster, chm: &Raster) -> Result<Raster> {
    if spectral.bands() != 4 {
        return Err(Error::Shape(format!(
            "spectral raster must have 4 bands, got {}",
            spectral.bands()
        )));
    }
    if chm.bands() != 1 {
        return Err(Error::Shape(format!(
            "CHM must be single band, got {}",
            chm.bands()
        )));
    }
    if spectral.width() != chm.width()
        || spectral.height() != chm.height()
        || !spectral.transform().aligned_with(chm.transform(), 1e-6)
    {
        return Err(Error::Alignment(format!(
            "spectral grid {}x{} @ ({}, {}, cell {}) does not match CHM {}x{} @ ({}, {}, cell {})",
            spectral.width(),
            spectral.height(),
            spectral.transform().origin_x,
            spectral.transform().origin_y,
            spectral.transform().cell_size,
            chm.width(),
            chm.height(),
            chm.transform().origin_x,
            chm.transform().origin_y,
            chm.transform().cell_size,
        )));
    }
    let plane = spectral.width() * spectral.height();
    let mut data = vec![0f32; plane * 5];
    for b in 0..4 {
        for i in 0..plane {
            data[b * plane + i] =
                spectral.value_at(b, i / spectral.width(), i % spectral.width()) as f32;
        }
    }
    for i in 0..plane {
        data[4 * plane + i] = chm.value_at(0, i / chm.width(), i % chm.width()) as f32;
    }
    Raster::new_f32(
        spectral.width(),
        spectral.height(),
        5,
        *spectral.transform(),
        ["red", "green", "blue", "nir", "chm"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        spectral.nodata().or(chm.nodata()),
        data,
    )
}

/// Rasterize stand polygons onto a grid. Pixel centers are tested with the
/// even-odd rule; later polygons overwrite earlier ones; the I/II stage merge
/// applies here; uncovered pixels get the unlabeled sentinel.
pub fn rasterize_stands(
    polygons: &[StandPolygon],
    scheme: &ClassScheme,
    grid: GeoTransform,
    width: usize,
    height: usize,
) -> Result<Raster> {
    for p in polygons {
        // re-validate so hand-built polygons can't bypass StandPolygon::new
        StandPolygon::new(p.rings.clone(), p.class_id)?;
        let merged = STAGE_MERGE[p.class_id as usize];
        if !scheme.contains(merged) {
            return Err(Error::Encoding(format!(
                "merged class {merged} not in scheme of {} classes",
                scheme.len()
            )));
        }
    }
    let boxed: Vec<(u8, (f64, f64, f64, f64), &StandPolygon)> = polygons
        .iter()
        .map(|p| (STAGE_MERGE[p.class_id as usize], p.bbox(), p))
        .collect();
    let mut out = vec![UNLABELED; width * height];
    use rayon::prelude::*;
    out.par_chunks_mut(width).enumerate().for_each(|(r, row)| {
        for (c, px) in row.iter_mut().enumerate() {
            let (x, y) = grid.pixel_center(r, c);
            for &(class, bb, poly) in &boxed {
                if x < bb.0 || x > bb.2 || y < bb.1 || y > bb.3 {
                    continue;
                }
                if poly.contains(x, y) {
                    *px = class;
                }
            }
        }
    });
    Raster::new_u8(
        width,
        height,
        1,
        grid,
        vec!["class".into()],
        Some(UNLABELED as f64),
        out,
    )
}

/// Cut a composite and its class raster into non-overlapping tiles anchored
/// at the raster origin. Tiles containing any nodata or unlabeled pixel are
/// discarded; kept tiles carry one-hot masks and grid coordinates.
pub fn tile_composite(
    composite: &Raster,
    mask_raster: &Raster,
    scheme: &ClassScheme,
    tile_pixels: usize,
) -> Result<TileSet> {
    if tile_pixels < 32 {
        return Err(Error::Config(format!(
            "tile size {tile_pixels} below the minimum of 32 pixels"
        )));
    }
    if mask_raster.bands() != 1 {
        return Err(Error::Shape(format!(
            "class raster must be single band, got {}",
            mask_raster.bands()
        )));
    }
    if composite.width() != mask_raster.width()
        || composite.height() != mask_raster.height()
        || !composite.transform().aligned_with(mask_raster.transform(), 1e-6)
    {
        return Err(Error::Alignment(
            "composite and class raster are on different grids".into(),
        ));
    }
    let tiles_y = composite.height() / tile_pixels;
    let tiles_x = composite.width() / tile_pixels;
    let mut tiles = Vec::new();
    for grid_row in 0..tiles_y {
        for grid_col in 0..tiles_x {
            let (r0, c0) = (grid_row * tile_pixels, grid_col * tile_pixels);
            let window = composite.crop(r0, c0, tile_pixels, tile_pixels)?;
            if window.has_nodata_pixels() {
                continue;
            }
            let mask_window = mask_raster.crop(r0, c0, tile_pixels, tile_pixels)?;
            let ids = mask_window
                .as_u8()
                .ok_or_else(|| Error::Shape("class raster must be u8".into()))?;
            if ids.iter().any(|&v| v == UNLABELED) {
                continue;
            }
            let mask = ClassMask::from_class_ids(tile_pixels, tile_pixels, scheme.len(), ids)?;
            tiles.push(Tile {
                tile_id: (grid_row * tiles_x + grid_col) as u64,
                grid_row,
                grid_col,
                composite: window,
                mask,
                split: None,
            });
        }
    }
    Ok(TileSet { tile_pixels, tiles })
}

/// Deterministic split assignment over `n` items: Fisher-Yates shuffle with a
/// ChaCha8 generator seeded from the config, then floor-then-remainder
/// partitioning.
pub fn assign_splits(n: usize, config: &SplitConfig) -> Result<Vec<Split>> {
    if n == 0 {
        return Err(Error::Input("cannot split an empty tile set".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    // the epsilon absorbs representation error in n*f so that products meant
    // to be integers (e.g. 760 * 0.70) floor to that integer
    let take = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
    let (n_train, n_val) = (take(config.fractions.0), take(config.fractions.1));
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(splits)
}

/// Assign every tile in the set to train/val/test.
pub fn split_dataset(mut tiles: TileSet, config: &SplitConfig) -> Result<TileSet> {
    let splits = assign_splits(tiles.tiles.len(), config)?;
    for (tile, split) in tiles.tiles.iter_mut().zip(splits) {
        tile.split = Some(split);
    }
    Ok(tiles)
}
