//! On-disk tile set layout: a directory of paired RSTR1 files plus a
//! `tiles.json` index. Masks are stored as single-band class rasters and
//! re-encoded to one-hot on load.

use serde::{Deserialize, Serialize};
use standseg_core::preprocess::{Split, Tile, TileSet};
use standseg_core::raster::{
    one_hot_encode, read_raster, write_raster, ClassScheme, Raster,
};
use standseg_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
struct TileEntry {
    tile_id: u64,
    grid_row: usize,
    grid_col: usize,
    split: Option<Split>,
    composite: String,
    mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TileIndex {
    tile_pixels: usize,
    tiles: Vec<TileEntry>,
}

fn mask_to_raster(tile: &Tile) -> Result<Raster> {
    Raster::new_u8(
        tile.mask.width(),
        tile.mask.height(),
        1,
        *tile.composite.transform(),
        vec!["class".to_string()],
        Some(255.0),
        tile.mask.to_class_ids(),
    )
}

/// Write every tile and the index. Returns the files written, index last.
pub fn store_tileset(tileset: &TileSet, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for tile in &tileset.tiles {
        let composite = format!("tile-{:05}.rstr", tile.tile_id);
        let mask = format!("tile-{:05}-mask.rstr", tile.tile_id);
        write_raster(&tile.composite, &dir.join(&composite))?;
        write_raster(&mask_to_raster(tile)?, &dir.join(&mask))?;
        written.push(dir.join(&composite));
        written.push(dir.join(&mask));
        entries.push(TileEntry {
            tile_id: tile.tile_id,
            grid_row: tile.grid_row,
            grid_col: tile.grid_col,
            split: tile.split,
            composite,
            mask,
        });
    }
    let index = TileIndex { tile_pixels: tileset.tile_pixels, tiles: entries };
    let body = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Encoding(format!("tiles.json: {e}")))?;
    std::fs::write(dir.join("tiles.json"), body + "\n")?;
    written.push(dir.join("tiles.json"));
    Ok(written)
}

pub fn load_tileset(dir: &Path) -> Result<TileSet> {
    let index_path = dir.join("tiles.json");
    let text = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::Input(format!("{}: {e}", index_path.display())))?;
    let index: TileIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("{}: {e}", index_path.display())))?;
    let scheme = ClassScheme::default_stands();
    let tiles = index
        .tiles
        .iter()
        .map(|entry| {
            let composite = read_raster(&dir.join(&entry.composite))?;
            let mask_raster = read_raster(&dir.join(&entry.mask))?;
            Ok(Tile {
                tile_id: entry.tile_id,
                grid_row: entry.grid_row,
                grid_col: entry.grid_col,
                composite,
                mask: one_hot_encode(&mask_raster, &scheme)?,
                split: entry.split,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TileSet { tile_pixels: index.tile_pixels, tiles })
}

/// Rewrite only the split assignments in an existing tiles.json.
pub fn update_splits(dir: &Path, tileset: &TileSet) -> Result<()> {
    let index_path = dir.join("tiles.json");
    let text = std::fs::read_to_string(&index_path)
        .map_err(|e| Error::Input(format!("{}: {e}", index_path.display())))?;
    let mut index: TileIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Corruption(format!("{}: {e}", index_path.display())))?;
    if index.tiles.len() != tileset.tiles.len() {
        return Err(Error::Corruption(format!(
            "tiles.json lists {} tiles, splitter saw {}",
            index.tiles.len(),
            tileset.tiles.len()
        )));
    }
    for (entry, tile) in index.tiles.iter_mut().zip(&tileset.tiles) {
        entry.split = tile.split;
    }
    let body = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::Encoding(format!("tiles.json: {e}")))?;
    std::fs::write(&index_path, body + "\n")?;
    Ok(())
}
