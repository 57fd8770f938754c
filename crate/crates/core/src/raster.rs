//! Raster data model, the RSTR1 container format, and pixel-level transforms.
//!
//! A [`Raster`] is an immutable georeferenced multi-band grid stored
//! band-sequentially in row-major order. The on-disk container (RSTR1) is a
//! small self-describing format: magic, little-endian header length, JSON
//! header, raw payload. Writes are deterministic so identical rasters produce
//! byte-identical files.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 5] = b"RSTR1";

/// Unlabeled sentinel used in class rasters for pixels outside every polygon.
pub const UNLABELED: u8 = 255;

/// Affine placement of a north-up raster: top-left corner and square cell size.
///
/// Pixel (r, c) has its center at
/// `(origin_x + (c + 0.5) * cell_size, origin_y - (r + 0.5) * cell_size)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub cell_size: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::Config(format!(
                "cell_size must be positive and finite, got {cell_size}"
            )));
        }
        Ok(Self {
            origin_x,
            origin_y,
            cell_size,
        })
    }

    /// World coordinates of the center of pixel (row, col).
    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.cell_size,
            self.origin_y - (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Grid cell containing world point (x, y), if inside the given extent.
    pub fn cell_of(&self, x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize)> {
        let c = (x - self.origin_x) / self.cell_size;
        let r = (self.origin_y - y) / self.cell_size;
        if c < 0.0 || r < 0.0 {
            return None;
        }
        let (r, c) = (r.floor() as usize, c.floor() as usize);
        if r < height && c < width {
            Some((r, c))
        } else {
            None
        }
    }

    /// True when two grids share cell size and origins within `tol` meters.
    pub fn aligned_with(&self, other: &GeoTransform, tol: f64) -> bool {
        (self.cell_size - other.cell_size).abs() <= tol
            && (self.origin_x - other.origin_x).abs() <= tol
            && (self.origin_y - other.origin_y).abs() <= tol
    }
}

/// Pixel storage, band-sequential row-major.
#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl RasterData {
    pub fn len(&self) -> usize {
        match self {
            RasterData::F32(v) => v.len(),
            RasterData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            RasterData::F32(_) => "f32",
            RasterData::U8(_) => "u8",
        }
    }
}

/// Georeferenced multi-band grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: usize,
    nodata: Option<f64>,
    transform: GeoTransform,
    band_names: Vec<String>,
    data: RasterData,
}

impl Raster {
    /// Build a float32 raster, validating the data-model invariants.
    pub fn new_f32(
        width: usize,
        height: usize,
        bands: usize,
        transform: GeoTransform,
        band_names: Vec<String>,
        nodata: Option<f64>,
        data: Vec<f32>,
    ) -> Result<Self> {
        Self::build(width, height, bands, transform, band_names, nodata, RasterData::F32(data))
    }

    /// Build an 8-bit raster, validating the data-model invariants.
    pub fn new_u8(
        width: usize,
        height: usize,
        bands: usize,
        transform: GeoTransform,
        band_names: Vec<String>,
        nodata: Option<f64>,
        data: Vec<u8>,
    ) -> Result<Self> {
        Self::build(width, height, bands, transform, band_names, nodata, RasterData::U8(data))
    }

    fn build(
        width: usize,
        height: usize,
        bands: usize,
        transform: GeoTransform,
        band_names: Vec<String>,
        nodata: Option<f64>,
        data: RasterData,
    ) -> Result<Self> {
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::Dimension(format!(
                "raster dims must be positive, got {width}x{height}x{bands}"
            )));
        }
        let expected = width * height * bands;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match {width}x{height}x{bands} = {expected}",
                data.len()
            )));
        }
        let band_names = if band_names.is_empty() {
            (0..bands).map(|b| format!("b{b}")).collect()
        } else if band_names.len() == bands {
            band_names
        } else {
            return Err(Error::Shape(format!(
                "{} band names for {bands} bands",
                band_names.len()
            )));
        };
        if let RasterData::F32(values) = &data {
            let nd = nodata.map(|v| v as f32);
            for (i, &v) in values.iter().enumerate() {
                if !v.is_finite() && Some(v) != nd {
                    return Err(Error::Numeric(format!(
                        "non-finite value {v} at flat index {i}"
                    )));
                }
            }
        }
        Ok(Self {
            width,
            height,
            bands,
            nodata,
            transform,
            band_names,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn nodata(&self) -> Option<f64> {
        self.nodata
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn data(&self) -> &RasterData {
        &self.data
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            RasterData::F32(v) => Some(v),
            RasterData::U8(_) => None,
        }
    }

    pub fn as_u8(&self) -> Option<&[u8]> {
        match &self.data {
            RasterData::U8(v) => Some(v),
            RasterData::F32(_) => None,
        }
    }

    #[inline]
    pub fn index(&self, band: usize, row: usize, col: usize) -> usize {
        band * self.width * self.height + row * self.width + col
    }

    /// Value at (band, row, col) widened to f64.
    #[inline]
    pub fn value_at(&self, band: usize, row: usize, col: usize) -> f64 {
        let i = self.index(band, row, col);
        match &self.data {
            RasterData::F32(v) => v[i] as f64,
            RasterData::U8(v) => v[i] as f64,
        }
    }

    /// True when the value equals the raster's nodata sentinel.
    pub fn is_nodata(&self, value: f64) -> bool {
        match self.nodata {
            Some(nd) => match &self.data {
                RasterData::F32(_) => value as f32 == nd as f32,
                RasterData::U8(_) => value == nd,
            },
            None => false,
        }
    }

    /// Extract a window of `rows x cols` pixels starting at (row0, col0).
    /// Pixel values are copied verbatim; the transform shifts to the window
    /// origin.
    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Raster> {
        if rows == 0 || cols == 0 || row0 + rows > self.height || col0 + cols > self.width {
            return Err(Error::Dimension(format!(
                "window {rows}x{cols} at (row {row0}, col {col0}) exceeds raster {}x{}",
                self.height, self.width
            )));
        }
        let transform = GeoTransform {
            origin_x: self.transform.origin_x + col0 as f64 * self.transform.cell_size,
            origin_y: self.transform.origin_y - row0 as f64 * self.transform.cell_size,
            cell_size: self.transform.cell_size,
        };
        let plane = rows * cols;
        let data = match &self.data {
            RasterData::F32(src) => {
                let mut out = vec![0f32; plane * self.bands];
                for b in 0..self.bands {
                    for r in 0..rows {
                        let s = self.index(b, row0 + r, col0);
                        out[b * plane + r * cols..b * plane + (r + 1) * cols]
                            .copy_from_slice(&src[s..s + cols]);
                    }
                }
                RasterData::F32(out)
            }
            RasterData::U8(src) => {
                let mut out = vec![0u8; plane * self.bands];
                for b in 0..self.bands {
                    for r in 0..rows {
                        let s = self.index(b, row0 + r, col0);
                        out[b * plane + r * cols..b * plane + (r + 1) * cols]
                            .copy_from_slice(&src[s..s + cols]);
                    }
                }
                RasterData::U8(out)
            }
        };
        Self::build(
            cols,
            rows,
            self.bands,
            transform,
            self.band_names.clone(),
            self.nodata,
            data,
        )
    }

    /// True when any pixel in the raster equals the nodata sentinel.
    pub fn has_nodata_pixels(&self) -> bool {
        let Some(nd) = self.nodata else { return false };
        match &self.data {
            RasterData::F32(v) => {
                let nd = nd as f32;
                v.iter().any(|&x| x == nd)
            }
            RasterData::U8(v) => v.iter().any(|&x| x as f64 == nd),
        }
    }
}

/// Ordered class list; ids are contiguous 0..N-1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassScheme {
    classes: Vec<(u8, String)>,
}

impl ClassScheme {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("class scheme needs at least one class".into()));
        }
        if labels.len() > UNLABELED as usize {
            return Err(Error::Config(format!(
                "at most {} classes supported",
                UNLABELED
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &labels {
            if !seen.insert(l.clone()) {
                return Err(Error::Config(format!("duplicate class label {l:?}")));
            }
        }
        Ok(Self {
            classes: labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| (i as u8, l))
                .collect(),
        })
    }

    /// The five development-stage classes used throughout the pipeline.
    pub fn default_stands() -> Self {
        Self::new(
            ["NF", "I-II", "III", "IV", "V"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        )
        .expect("default scheme is valid")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|(_, l)| l.as_str()).collect()
    }

    pub fn label(&self, id: u8) -> Option<&str> {
        self.classes.get(id as usize).map(|(_, l)| l.as_str())
    }

    pub fn contains(&self, id: u8) -> bool {
        (id as usize) < self.classes.len()
    }
}

/// One binary layer per class; exactly one layer is 1 at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMask {
    width: usize,
    height: usize,
    n_classes: usize,
    /// Plane-major 0/1 values: `layers[k*w*h + r*w + c]`.
    layers: Vec<u8>,
}

impl ClassMask {
    pub fn from_class_ids(width: usize, height: usize, n_classes: usize, ids: &[u8]) -> Result<Self> {
        if ids.len() != width * height {
            return Err(Error::Shape(format!(
                "{} class ids for {width}x{height} mask",
                ids.len()
            )));
        }
        let mut layers = vec![0u8; n_classes * width * height];
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= n_classes {
                return Err(Error::Encoding(format!(
                    "class id {} out of range 0..{} at pixel (row {}, col {})",
                    id,
                    n_classes,
                    i / width,
                    i % width
                )));
            }
            layers[id as usize * width * height + i] = 1;
        }
        Ok(Self {
            width,
            height,
            n_classes,
            layers,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn layers(&self) -> &[u8] {
        &self.layers
    }

    /// Value of layer k at (row, col).
    pub fn layer_at(&self, k: usize, row: usize, col: usize) -> u8 {
        self.layers[k * self.width * self.height + row * self.width + col]
    }

    /// The class whose layer is 1 at (row, col).
    pub fn class_at(&self, row: usize, col: usize) -> u8 {
        let plane = self.width * self.height;
        let i = row * self.width + col;
        for k in 0..self.n_classes {
            if self.layers[k * plane + i] == 1 {
                return k as u8;
            }
        }
        unreachable!("one-hot invariant violated")
    }

    /// Check the one-hot invariant: exactly one active layer per pixel.
    pub fn is_one_hot(&self) -> bool {
        let plane = self.width * self.height;
        (0..plane).all(|i| {
            (0..self.n_classes)
                .map(|k| self.layers[k * plane + i] as usize)
                .sum::<usize>()
                == 1
        })
    }

    /// Flat class ids in row-major order.
    pub fn to_class_ids(&self) -> Vec<u8> {
        (0..self.height)
            .flat_map(|r| (0..self.width).map(move |c| (r, c)))
            .map(|(r, c)| self.class_at(r, c))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct RasterHeader {
    width: u64,
    height: u64,
    bands: u64,
    dtype: String,
    nodata: Option<f64>,
    origin_x: f64,
    origin_y: f64,
    cell_size: f64,
    band_names: Vec<String>,
}

/// Serialize a raster to RSTR1 bytes. Deterministic: the same raster always
/// produces the same byte stream.
pub fn raster_to_bytes(raster: &Raster) -> Vec<u8> {
    let header = RasterHeader {
        width: raster.width as u64,
        height: raster.height as u64,
        bands: raster.bands as u64,
        dtype: raster.data.dtype_name().to_string(),
        nodata: raster.nodata,
        origin_x: raster.transform.origin_x,
        origin_y: raster.transform.origin_y,
        cell_size: raster.transform.cell_size,
        band_names: raster.band_names.clone(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let mut out = Vec::with_capacity(9 + header_json.len() + raster.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    match &raster.data {
        RasterData::F32(values) => {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        RasterData::U8(values) => out.extend_from_slice(values),
    }
    out
}

/// Parse a raster from RSTR1 bytes.
pub fn raster_from_bytes(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 9 {
        return Err(Error::Format("file shorter than the RSTR1 preamble".into()));
    }
    if &bytes[0..5] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"RSTR1\"",
            String::from_utf8_lossy(&bytes[0..5])
        )));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + header_len {
        return Err(Error::Corruption(format!(
            "header length {header_len} exceeds file size {}",
            bytes.len()
        )));
    }
    let header: RasterHeader = serde_json::from_slice(&bytes[9..9 + header_len])
        .map_err(|e| Error::Corruption(format!("invalid header JSON: {e}")))?;
    let (width, height, bands) = (
        header.width as usize,
        header.height as usize,
        header.bands as usize,
    );
    let n = width * height * bands;
    let payload = &bytes[9 + header_len..];
    let transform = GeoTransform::new(header.origin_x, header.origin_y, header.cell_size)?;
    let data = match header.dtype.as_str() {
        "f32" => {
            if payload.len() != n * 4 {
                return Err(Error::Corruption(format!(
                    "payload is {} bytes, header implies {}",
                    payload.len(),
                    n * 4
                )));
            }
            RasterData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        "u8" => {
            if payload.len() != n {
                return Err(Error::Corruption(format!(
                    "payload is {} bytes, header implies {n}",
                    payload.len()
                )));
            }
            RasterData::U8(payload.to_vec())
        }
        other => return Err(Error::Corruption(format!("unknown dtype {other:?}"))),
    };
    Raster::build(
        width,
        height,
        bands,
        transform,
        header.band_names,
        header.nodata,
        data,
    )
}

/// Write a raster to disk as an RSTR1 container.
pub fn write_raster(raster: &Raster, path: &Path) -> Result<()> {
    let bytes = raster_to_bytes(raster);
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

/// Read an RSTR1 container from disk.
pub fn read_raster(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path)?;
    raster_from_bytes(&bytes)
}

/// Downsample by averaging `factor`x`factor` blocks per band.
///
/// A block that contains any nodata pixel becomes nodata in the output.
/// Accumulation runs in f64; output is float32 with cell size scaled by the
/// factor.
pub fn downsample_block_mean(raster: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 {
        return Err(Error::Config("downsample factor must be positive".into()));
    }
    if raster.width % factor != 0 || raster.height % factor != 0 {
        return Err(Error::Dimension(format!(
            "dims {}x{} not divisible by factor {factor}",
            raster.width, raster.height
        )));
    }
    let (ow, oh) = (raster.width / factor, raster.height / factor);
    let nd = raster.nodata;
    let mut out = vec![0f32; ow * oh * raster.bands];
    for band in 0..raster.bands {
        for orow in 0..oh {
            for ocol in 0..ow {
                let mut acc = 0f64;
                let mut block_nodata = false;
                'block: for dr in 0..factor {
                    for dc in 0..factor {
                        let v = raster.value_at(band, orow * factor + dr, ocol * factor + dc);
                        if raster.is_nodata(v) {
                            block_nodata = true;
                            break 'block;
                        }
                        acc += v;
                    }
                }
                out[band * ow * oh + orow * ow + ocol] = if block_nodata {
                    nd.expect("nodata pixel implies sentinel is set") as f32
                } else {
                    (acc / (factor * factor) as f64) as f32
                };
            }
        }
    }
    let transform = GeoTransform::new(
        raster.transform.origin_x,
        raster.transform.origin_y,
        raster.transform.cell_size * factor as f64,
    )?;
    Raster::new_f32(ow, oh, raster.bands, transform, raster.band_names.clone(), nd, out)
}

/// Scale a 5-band composite into [0, 1]: spectral bands divided by 255, the
/// CHM band divided by `chm_max` and clamped to 1. Nodata pixels keep their
/// sentinel value.
pub fn normalize_composite(raster: &Raster, chm_max: f64) -> Result<Raster> {
    if raster.bands != 5 {
        return Err(Error::Shape(format!(
            "composite must have 5 bands [red, green, blue, nir, chm], got {}",
            raster.bands
        )));
    }
    if !(chm_max > 0.0) {
        return Err(Error::Config(format!("chm_max must be positive, got {chm_max}")));
    }
    let plane = raster.width * raster.height;
    let mut out = vec![0f32; plane * 5];
    for band in 0..5 {
        for i in 0..plane {
            let v = raster.value_at(band, i / raster.width, i % raster.width);
            out[band * plane + i] = if raster.is_nodata(v) {
                raster.nodata.unwrap() as f32
            } else if band < 4 {
                (v / 255.0) as f32
            } else {
                (v / chm_max).min(1.0) as f32
            };
        }
    }
    Raster::new_f32(
        raster.width,
        raster.height,
        5,
        raster.transform,
        raster.band_names.clone(),
        raster.nodata,
        out,
    )
}

/// One-hot encode a single-band class raster against a scheme.
pub fn one_hot_encode(class_raster: &Raster, scheme: &ClassScheme) -> Result<ClassMask> {
    if class_raster.bands != 1 {
        return Err(Error::Shape(format!(
            "class raster must be single band, got {}",
            class_raster.bands
        )));
    }
    let (w, h) = (class_raster.width, class_raster.height);
    let mut ids = vec![0u8; w * h];
    for r in 0..h {
        for c in 0..w {
            let v = class_raster.value_at(0, r, c);
            if !v.is_finite() || v.fract() != 0.0 || v < 0.0 || v > u8::MAX as f64 {
                return Err(Error::Encoding(format!(
                    "pixel value {v} at (row {r}, col {c}) is not a class id"
                )));
            }
            let id = v as u8;
            if !scheme.contains(id) {
                return Err(Error::Encoding(format!(
                    "class id {id} out of range 0..{} at (row {r}, col {c})",
                    scheme.len()
                )));
            }
            ids[r * w + c] = id;
        }
    }
    ClassMask::from_class_ids(w, h, scheme.len(), &ids)
}

/// Collapse per-pixel class scores into a single-band class raster by argmax.
/// Ties break toward the lowest class index.
pub fn decode_argmax(probabilities: &Raster) -> Result<Raster> {
    if probabilities.bands > u8::MAX as usize {
        return Err(Error::Shape(format!(
            "{} score bands exceed the class raster range",
            probabilities.bands
        )));
    }
    let (w, h, n) = (probabilities.width, probabilities.height, probabilities.bands);
    let mut out = vec![0u8; w * h];
    for r in 0..h {
        for c in 0..w {
            let mut best = f64::NEG_INFINITY;
            let mut best_k = 0u8;
            for k in 0..n {
                let v = probabilities.value_at(k, r, c);
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite score {v} in band {k} at (row {r}, col {c})"
                    )));
                }
                if v > best {
                    best = v;
                    best_k = k as u8;
                }
            }
            out[r * w + c] = best_k;
        }
    }
    Raster::new_u8(
        w,
        h,
        1,
        probabilities.transform,
        vec!["class".to_string()],
        None,
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn transform() -> GeoTransform {
        GeoTransform::new(1000.0, 2000.0, 1.0).unwrap()
    }

    #[test]
    fn round_trip_identity() {
        let r = Raster::new_f32(
            2,
            2,
            1,
            GeoTransform::new(10.0, 20.0, 0.25).unwrap(),
            vec!["h".into()],
            None,
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        let back = raster_from_bytes(&raster_to_bytes(&r)).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = raster_to_bytes(
            &Raster::new_u8(1, 1, 1, transform(), vec![], None, vec![7]).unwrap(),
        );
        bytes[0..4].copy_from_slice(b"XXXX");
        match raster_from_bytes(&bytes) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_corruption_error() {
        let bytes = raster_to_bytes(
            &Raster::new_f32(2, 2, 1, transform(), vec![], None, vec![0.0; 4]).unwrap(),
        );
        match raster_from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Corruption(_)) => {}
            other => panic!("expected corruption error, got {other:?}"),
        }
    }

    #[test]
    fn writes_are_deterministic() {
        let r = Raster::new_f32(
            3,
            2,
            2,
            transform(),
            vec!["a".into(), "b".into()],
            Some(-9999.0),
            vec![0.5; 12],
        )
        .unwrap();
        assert_eq!(raster_to_bytes(&r), raster_to_bytes(&r));
    }

    #[test]
    fn nodata_round_trips_in_header() {
        let r = Raster::new_u8(1, 1, 4, transform(), vec![], Some(0.0), vec![1, 2, 3, 4]).unwrap();
        let back = raster_from_bytes(&raster_to_bytes(&r)).unwrap();
        assert_eq!(back.nodata(), Some(0.0));
        assert!(raster_to_bytes(&r).windows(4).any(|w| w == b"\"u8\""));
    }

    #[test]
    fn downsample_constant_block() {
        let r = Raster::new_f32(4, 4, 1, transform(), vec![], None, vec![100.0; 16]).unwrap();
        let d = downsample_block_mean(&r, 4).unwrap();
        assert_eq!(d.width(), 1);
        assert_eq!(d.height(), 1);
        assert_eq!(d.value_at(0, 0, 0), 100.0);
        assert_eq!(d.transform().cell_size, 4.0);
    }

    #[test]
    fn downsample_forced_mean() {
        let r =
            Raster::new_f32(2, 2, 1, transform(), vec![], None, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = downsample_block_mean(&r, 2).unwrap();
        assert_eq!(d.value_at(0, 0, 0), 2.5);
    }

    #[test]
    fn downsample_rejects_indivisible_dims() {
        let r = Raster::new_f32(3, 4, 1, transform(), vec![], None, vec![0.0; 12]).unwrap();
        assert!(matches!(downsample_block_mean(&r, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn downsample_nodata_block_propagates() {
        let mut data = vec![1.0f32; 16];
        data[5] = -9999.0;
        let r = Raster::new_f32(4, 4, 1, transform(), vec![], Some(-9999.0), data).unwrap();
        let d = downsample_block_mean(&r, 2).unwrap();
        assert!(d.is_nodata(d.value_at(0, 0, 0)));
        assert_eq!(d.value_at(0, 0, 1), 1.0);
    }

    #[test]
    fn normalize_band_maxima_map_to_one() {
        let plane = 4;
        let mut data = vec![0f32; plane * 5];
        data[0] = 255.0; // red
        data[4 * plane] = 39.0; // chm
        data[4 * plane + 1] = 45.0; // above chm_max, clamps
        let names = ["red", "green", "blue", "nir", "chm"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let r = Raster::new_f32(2, 2, 5, transform(), names, None, data).unwrap();
        let n = normalize_composite(&r, 39.0).unwrap();
        assert_eq!(n.value_at(0, 0, 0), 1.0);
        assert_eq!(n.value_at(4, 0, 0), 1.0);
        assert_eq!(n.value_at(4, 0, 1), 1.0);
        assert_eq!(n.value_at(1, 0, 0), 0.0);
    }

    #[test]
    fn normalize_rejects_wrong_band_count() {
        let r = Raster::new_f32(1, 1, 4, transform(), vec![], None, vec![0.0; 4]).unwrap();
        assert!(matches!(normalize_composite(&r, 39.0), Err(Error::Shape(_))));
    }

    #[test]
    fn one_hot_definition() {
        let scheme = ClassScheme::default_stands();
        let r = Raster::new_u8(1, 1, 1, transform(), vec![], None, vec![2]).unwrap();
        let m = one_hot_encode(&r, &scheme).unwrap();
        let layers: Vec<u8> = (0..5).map(|k| m.layer_at(k, 0, 0)).collect();
        assert_eq!(layers, vec![0, 0, 1, 0, 0]);
    }

    #[test]
    fn one_hot_uniform_class_zero() {
        let scheme = ClassScheme::default_stands();
        let r = Raster::new_u8(3, 3, 1, transform(), vec![], None, vec![0; 9]).unwrap();
        let m = one_hot_encode(&r, &scheme).unwrap();
        assert!((0..9).all(|i| m.layer_at(0, i / 3, i % 3) == 1));
        assert!(m.is_one_hot());
    }

    #[test]
    fn one_hot_rejects_out_of_range_with_location() {
        let scheme = ClassScheme::default_stands();
        let r = Raster::new_u8(2, 2, 1, transform(), vec![], None, vec![0, 1, 9, 2]).unwrap();
        match one_hot_encode(&r, &scheme) {
            Err(Error::Encoding(msg)) => {
                assert!(msg.contains('9'), "message should name the value: {msg}");
                assert!(msg.contains("row 1"), "message should name the location: {msg}");
            }
            other => panic!("expected encoding error, got {other:?}"),
        }
    }

    #[test]
    fn argmax_picks_largest_and_breaks_ties_low() {
        let r = Raster::new_f32(
            1,
            1,
            3,
            transform(),
            vec![],
            None,
            vec![0.1, 0.7, 0.2],
        )
        .unwrap();
        assert_eq!(decode_argmax(&r).unwrap().value_at(0, 0, 0), 1.0);

        let uniform =
            Raster::new_f32(1, 1, 5, transform(), vec![], None, vec![0.2; 5]).unwrap();
        assert_eq!(decode_argmax(&uniform).unwrap().value_at(0, 0, 0), 0.0);
    }

    #[test]
    fn argmax_rejects_non_finite() {
        let r = Raster::new_f32(
            1,
            1,
            2,
            transform(),
            vec![],
            Some(f64::INFINITY),
            vec![0.0, f32::INFINITY],
        )
        .unwrap();
        assert!(matches!(decode_argmax(&r), Err(Error::Numeric(_))));
    }

    proptest! {
        #[test]
        fn rstr1_round_trip_is_bit_exact(
            width in 1usize..8,
            height in 1usize..8,
            bands in 1usize..4,
            use_u8 in any::<bool>(),
            nodata in proptest::option::of(-1e6f64..1e6),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = width * height * bands;
            let r = if use_u8 {
                let data: Vec<u8> = (0..n).map(|_| rng.random()).collect();
                Raster::new_u8(width, height, bands, transform(), vec![], nodata, data).unwrap()
            } else {
                let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1e4f32..1e4)).collect();
                Raster::new_f32(width, height, bands, transform(), vec![], nodata, data).unwrap()
            };
            let bytes = raster_to_bytes(&r);
            prop_assert_eq!(&raster_to_bytes(&raster_from_bytes(&bytes).unwrap()), &bytes);
        }

        #[test]
        fn one_hot_argmax_round_trip(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let scheme = ClassScheme::default_stands();
            let ids: Vec<u8> = (0..48).map(|_| rng.random_range(0..5)).collect();
            let r = Raster::new_u8(8, 6, 1, transform(), vec![], None, ids.clone()).unwrap();
            let mask = one_hot_encode(&r, &scheme).unwrap();
            prop_assert!(mask.is_one_hot());
            prop_assert_eq!(mask.to_class_ids(), ids.clone());

            // decode_argmax over the layers restores the ids
            let layer_data: Vec<f32> = mask.layers().iter().map(|&b| b as f32).collect();
            let layers = Raster::new_f32(8, 6, 5, transform(), vec![], None, layer_data).unwrap();
            let decoded = decode_argmax(&layers).unwrap();
            prop_assert_eq!(decoded.as_u8().unwrap(), &ids[..]);
        }
    }
}
