//! Deterministic synthetic scenes: Voronoi stand mosaics with a matching
//! spectral image, point cloud, stand polygons, and class raster.

use crate::error::{Error, Result};
use crate::numeric::mix_key;
use crate::preprocess::{
    build_chm, stack_composite, tile_composite, Point3, StandPolygon, STAGE_UNMERGE,
};
use crate::raster::{normalize_composite, ClassScheme, GeoTransform, Raster};
use crate::vectorize::{label_components, rings_to_world, trace_rings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

const TAG_SITES: u64 = 0x5349_5445;
const TAG_CLASS: u64 = 0x434C_4153;
const TAG_SPECTRAL: u64 = 0x5350_4543;
const TAG_POINTS: u64 = 0x504F_494E;

/// Recipe for one synthetic scene. Heights and band means are indexed by
/// class (NF, I-II, III, IV, V); spectral means are [red, green, blue, nir].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub n_stands: usize,
    pub class_priors: [f64; 5],
    pub height_ranges: [(f64, f64); 5],
    pub spectral_means: [[f64; 4]; 5],
    /// Std-dev of per-pixel Gaussian noise in digital numbers; 0 disables it.
    pub spectral_noise: f64,
    /// Point-cloud density in points per square meter.
    pub point_density: f64,
    pub cell_size: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 256,
            height: 256,
            n_stands: 24,
            class_priors: [0.15, 0.15, 0.30, 0.18, 0.22],
            height_ranges: [
                (0.0, 0.3),
                (0.0, 3.0),
                (5.0, 15.0),
                (10.0, 20.0),
                (15.0, 30.0),
            ],
            spectral_means: [
                [180.0, 170.0, 160.0, 40.0],
                [120.0, 140.0, 110.0, 80.0],
                [90.0, 120.0, 90.0, 120.0],
                [70.0, 100.0, 80.0, 160.0],
                [60.0, 90.0, 70.0, 200.0],
            ],
            spectral_noise: 2.0,
            point_density: 1.4,
            cell_size: 1.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.n_stands == 0 || self.n_stands > self.width * self.height {
            return Err(Error::Config(format!(
                "n_stands must be in 1..={}, got {}",
                self.width * self.height,
                self.n_stands
            )));
        }
        let prior_sum: f64 = self.class_priors.iter().sum();
        if self.class_priors.iter().any(|&p| !(p >= 0.0)) || !(prior_sum > 0.0) {
            return Err(Error::Config(
                "class priors must be non-negative with a positive sum".into(),
            ));
        }
        for (c, &(lo, hi)) in self.height_ranges.iter().enumerate() {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::Config(format!(
                    "height range for class {c} must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
                )));
            }
        }
        for row in &self.spectral_means {
            if row.iter().any(|&m| !(0.0..=255.0).contains(&m)) {
                return Err(Error::Config(
                    "spectral means must lie in [0, 255]".into(),
                ));
            }
        }
        if !(self.spectral_noise >= 0.0 && self.spectral_noise.is_finite()) {
            return Err(Error::Config(format!(
                "spectral noise must be finite and non-negative, got {}",
                self.spectral_noise
            )));
        }
        if !(self.point_density > 0.0 && self.point_density.is_finite()) {
            return Err(Error::Config(format!(
                "point density must be positive, got {}",
                self.point_density
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Config(format!(
                "cell size must be positive, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }
}

/// One generated scene. The class raster is pixel-for-pixel consistent with
/// rasterizing `polygons`, and `spectral` band 4 (nir) separates the classes
/// whenever `spectral_noise` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spectral: Raster,
    pub cloud: Vec<Point3>,
    pub polygons: Vec<StandPolygon>,
    pub class_raster: Raster,
}

fn draw_class(priors: &[f64; 5], rng: &mut ChaCha8Rng) -> u8 {
    let total: f64 = priors.iter().sum();
    let u = rng.random_range(0.0..1.0) * total;
    let mut cum = 0.0;
    for (c, &p) in priors.iter().enumerate() {
        cum += p;
        if u < cum {
            return c as u8;
        }
    }
    4
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let grid = GeoTransform::new(0.0, h as f64 * spec.cell_size, spec.cell_size)?;

    // distinct stand seed sites
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[spec.seed, TAG_SITES]));
    let mut taken = BTreeSet::new();
    let mut sites: Vec<(usize, usize)> = Vec::with_capacity(spec.n_stands);
    while sites.len() < spec.n_stands {
        let r = rng.random_range(0..h);
        let c = rng.random_range(0..w);
        if taken.insert((r, c)) {
            sites.push((r, c));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[spec.seed, TAG_CLASS]));
    let site_class: Vec<u8> = (0..spec.n_stands)
        .map(|_| draw_class(&spec.class_priors, &mut rng))
        .collect();

    // nearest-site partition; ties go to the lowest site index
    let mut site_map = vec![0u32; w * h];
    for (p, cell) in site_map.iter_mut().enumerate() {
        let (r, c) = (p / w, p % w);
        let mut best = u64::MAX;
        let mut winner = 0u32;
        for (i, &(sr, sc)) in sites.iter().enumerate() {
            let dr = r.abs_diff(sr) as u64;
            let dc = c.abs_diff(sc) as u64;
            let d = dr * dr + dc * dc;
            if d < best {
                best = d;
                winner = i as u32;
            }
        }
        *cell = winner;
    }
    let class_ids: Vec<u8> = site_map.iter().map(|&s| site_class[s as usize]).collect();
    let class_raster = Raster::new_u8(
        w,
        h,
        1,
        grid,
        vec!["class".into()],
        Some(255.0),
        class_ids.clone(),
    )?;

    // trace each 4-connected cell into a polygon so rasterization is exact
    let (comp_of, comp_site, _) = label_components(&site_map, w, h);
    let mut polygons = Vec::with_capacity(comp_site.len());
    for (comp, &site) in comp_site.iter().enumerate() {
        let rings = trace_rings(&comp_of, comp as u32, w, h);
        let world = rings_to_world(&rings, &grid);
        polygons.push(StandPolygon::new(
            world,
            STAGE_UNMERGE[site_class[site as usize] as usize],
        )?);
    }

    // spectral bands: class mean plus seeded per-pixel noise
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[spec.seed, TAG_SPECTRAL]));
    let noise = Normal::new(0.0, spec.spectral_noise.max(f64::MIN_POSITIVE))
        .expect("std validated finite");
    let mut spectral_data = vec![0u8; 4 * w * h];
    for band in 0..4 {
        for p in 0..w * h {
            let mean = spec.spectral_means[class_ids[p] as usize][band];
            let value = if spec.spectral_noise > 0.0 {
                mean + noise.sample(&mut rng)
            } else {
                mean
            };
            spectral_data[band * w * h + p] = value.round().clamp(0.0, 255.0) as u8;
        }
    }
    let spectral = Raster::new_u8(
        w,
        h,
        4,
        grid,
        vec!["red".into(), "green".into(), "blue".into(), "nir".into()],
        None,
        spectral_data,
    )?;

    // point cloud: uniform positions, z drawn from the stand's height range
    let mut rng = ChaCha8Rng::seed_from_u64(mix_key(&[spec.seed, TAG_POINTS]));
    let extent_x = w as f64 * spec.cell_size;
    let extent_y = h as f64 * spec.cell_size;
    let n_points = (spec.point_density * extent_x * extent_y).round() as usize;
    let mut cloud = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x = grid.origin_x + rng.random_range(0.0..1.0) * extent_x;
        let y = grid.origin_y - rng.random_range(0.0..1.0) * extent_y;
        let u = rng.random_range(0.0..1.0);
        let (r, c) = grid
            .cell_of(x, y, w, h)
            .expect("sampled point lies inside the scene");
        let (lo, hi) = spec.height_ranges[class_ids[r * w + c] as usize];
        cloud.push([x, y, lo + u * (hi - lo)]);
    }

    Ok(Scene {
        spectral,
        cloud,
        polygons,
        class_raster,
    })
}

/// Run a scene through the preprocessing chain (CHM, composite, normalize,
/// tile) and return the resulting unsplit tile set.
pub fn scene_to_tileset(scene: &Scene, chm_max: f64, tile_pixels: usize) -> Result<crate::preprocess::TileSet> {
    let w = scene.class_raster.width();
    let h = scene.class_raster.height();
    let chm = build_chm(&scene.cloud, *scene.class_raster.transform(), w, h)?;
    let composite = stack_composite(&scene.spectral, &chm)?;
    let normalized = normalize_composite(&composite, chm_max)?;
    tile_composite(
        &normalized,
        &scene.class_raster,
        &ClassScheme::default_stands(),
        tile_pixels,
    )
}
