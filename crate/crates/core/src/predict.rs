//! Scene-scale inference: overlapped tiling, frozen forward passes, and
//! center-priority stitching.

use crate::error::{Error, Result};
use crate::raster::{decode_argmax, Raster};
use crate::unet::{composite_to_tensor, probs_to_raster, UNetModel};
use rayon::prelude::*;

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let m = i % (2 * n - 2);
    if m < n {
        m
    } else {
        2 * n - 2 - m
    }
}

/// Mirror-pad a float composite on the right and bottom up to the requested
/// minimum size; the origin (and so the top-left crop window) is unchanged.
pub(crate) fn reflect_pad(raster: &Raster, min_w: usize, min_h: usize) -> Result<Raster> {
    let data = raster
        .as_f32()
        .ok_or_else(|| Error::Shape("composite must be float32".into()))?;
    let (w, h) = (raster.width(), raster.height());
    let (pw, ph) = (w.max(min_w), h.max(min_h));
    let mut out = vec![0f32; raster.bands() * pw * ph];
    for band in 0..raster.bands() {
        for r in 0..ph {
            let src_row = &data[band * w * h + reflect_index(r, h) * w..];
            let dst_row = &mut out[band * pw * ph + r * pw..][..pw];
            for (c, dst) in dst_row.iter_mut().enumerate() {
                *dst = src_row[reflect_index(c, w)];
            }
        }
    }
    Raster::new_f32(
        pw,
        ph,
        raster.bands(),
        *raster.transform(),
        raster.band_names().to_vec(),
        raster.nodata(),
        out,
    )
}

/// Tile start offsets covering `total` pixels, stepping by `stride` with the
/// final tile flush against the far edge.
fn tile_starts(total: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut at = 0;
    loop {
        if at + tile >= total {
            starts.push(total - tile);
            break;
        }
        starts.push(at);
        at += stride;
    }
    starts
}

/// Predict a class map for a whole scene by running the model on an
/// overlapped tile grid and stitching with center priority: each output
/// pixel comes from the covering tile in which it lies farthest from the
/// tile edge (ties: first tile in row-major order). Scenes smaller than a
/// tile are reflection-padded and cropped back.
pub fn predict_and_stitch(
    model: &UNetModel<f32>,
    composite: &Raster,
    tile_pixels: usize,
    overlap: usize,
) -> Result<Raster> {
    if overlap % 2 != 0 || 2 * overlap >= tile_pixels {
        return Err(Error::Config(format!(
            "overlap must be even and below half the tile size, got {overlap} for {tile_pixels} px tiles"
        )));
    }
    let (w, h) = (composite.width(), composite.height());
    if w < tile_pixels || h < tile_pixels {
        let padded = reflect_pad(composite, tile_pixels, tile_pixels)?;
        let full = predict_and_stitch(model, &padded, tile_pixels, overlap)?;
        return full.crop(0, 0, h, w);
    }

    let stride = tile_pixels - overlap;
    let mut coords = Vec::new();
    for &r0 in &tile_starts(h, tile_pixels, stride) {
        for &c0 in &tile_starts(w, tile_pixels, stride) {
            coords.push((r0, c0));
        }
    }
    let n_classes = model.config.n_classes;
    let band_names: Vec<String> = (0..n_classes).map(|c| format!("class{c}")).collect();
    let tiles: Result<Vec<(usize, usize, Vec<u8>)>> = coords
        .par_iter()
        .map(|&(r0, c0)| {
            let window = composite.crop(r0, c0, tile_pixels, tile_pixels)?;
            let x = composite_to_tensor::<f32>(&window)?;
            let probs = model.forward_infer(&x)?;
            let scores = probs_to_raster(&probs, 0, *window.transform(), band_names.clone())?;
            let classes = decode_argmax(&scores)?;
            Ok((r0, c0, classes.as_u8().expect("argmax is uint8").to_vec()))
        })
        .collect();

    let mut best = vec![-1i64; w * h];
    let mut out = vec![0u8; w * h];
    for (r0, c0, classes) in tiles? {
        for tr in 0..tile_pixels {
            for tc in 0..tile_pixels {
                let margin = tr
                    .min(tile_pixels - 1 - tr)
                    .min(tc)
                    .min(tile_pixels - 1 - tc) as i64;
                let i = (r0 + tr) * w + c0 + tc;
                if margin > best[i] {
                    best[i] = margin;
                    out[i] = classes[tr * tile_pixels + tc];
                }
            }
        }
    }
    Raster::new_u8(
        w,
        h,
        1,
        *composite.transform(),
        vec!["class".into()],
        None,
        out,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;
    use crate::unet::UNetConfig;
    use crate::autodiff::Tensor4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frozen_model() -> UNetModel<f32> {
        let config = UNetConfig {
            base_filters: 4,
            depth: 2,
            ..UNetConfig::default()
        };
        let mut model = UNetModel::build(config, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let warm: Vec<f32> = (0..2 * 5 * 32 * 32)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let x = Tensor4::new((2, 5, 32, 32), warm).unwrap();
        model.forward_train(&x, &mut rng).unwrap();
        model
    }

    fn random_composite(w: usize, h: usize, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..5 * w * h).map(|_| rng.random_range(0.0..1.0)).collect();
        let grid = GeoTransform::new(0.0, h as f64, 1.0).unwrap();
        let names = ["red", "green", "blue", "nir", "chm"]
            .map(String::from)
            .to_vec();
        Raster::new_f32(w, h, 5, grid, names, None, data).unwrap()
    }

    fn single_shot_classes(model: &UNetModel<f32>, window: &Raster) -> Vec<u8> {
        let x = composite_to_tensor::<f32>(window).unwrap();
        let probs = model.forward_infer(&x).unwrap();
        let names: Vec<String> = (0..5).map(|c| format!("class{c}")).collect();
        let scores = probs_to_raster(&probs, 0, *window.transform(), names).unwrap();
        decode_argmax(&scores).unwrap().as_u8().unwrap().to_vec()
    }

    #[test]
    fn overlap_zero_concatenates_independent_tiles() {
        let model = frozen_model();
        let composite = random_composite(64, 32, 4);
        let stitched = predict_and_stitch(&model, &composite, 32, 0).unwrap();
        let mut expected = vec![0u8; 64 * 32];
        for c0 in [0usize, 32] {
            let window = composite.crop(0, c0, 32, 32).unwrap();
            let classes = single_shot_classes(&model, &window);
            for r in 0..32 {
                expected[r * 64 + c0..r * 64 + c0 + 32]
                    .copy_from_slice(&classes[r * 32..(r + 1) * 32]);
            }
        }
        assert_eq!(stitched.as_u8().unwrap(), &expected[..]);
    }

    #[test]
    fn single_tile_scene_matches_single_shot_inference() {
        let model = frozen_model();
        let composite = random_composite(32, 32, 5);
        let stitched = predict_and_stitch(&model, &composite, 32, 8).unwrap();
        assert_eq!(
            stitched.as_u8().unwrap(),
            &single_shot_classes(&model, &composite)[..]
        );
    }

    #[test]
    fn constant_scene_repeats_the_tile_pattern() {
        // identical windows must yield identical tiles, so with overlap 0 the
        // stitched halves of a constant scene are copies of each other
        let model = frozen_model();
        let grid = GeoTransform::new(0.0, 32.0, 1.0).unwrap();
        let names = ["red", "green", "blue", "nir", "chm"]
            .map(String::from)
            .to_vec();
        let composite =
            Raster::new_f32(64, 32, 5, grid, names, None, vec![0.3; 5 * 64 * 32]).unwrap();
        let out = predict_and_stitch(&model, &composite, 32, 0).unwrap();
        let map = out.as_u8().unwrap();
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(map[r * 64 + c], map[r * 64 + 32 + c], "pixel ({r}, {c})");
            }
        }
        let again = predict_and_stitch(&model, &composite, 32, 0).unwrap();
        assert_eq!(map, again.as_u8().unwrap());
    }

    #[test]
    fn undersized_scene_is_padded_and_cropped_back() {
        let model = frozen_model();
        let composite = random_composite(20, 24, 6);
        let stitched = predict_and_stitch(&model, &composite, 32, 0).unwrap();
        assert_eq!((stitched.width(), stitched.height()), (20, 24));
        // identical to predicting the manually padded scene and cropping
        let padded = reflect_pad(&composite, 32, 32).unwrap();
        assert_eq!((padded.width(), padded.height()), (32, 32));
        let full = predict_and_stitch(&model, &padded, 32, 0).unwrap();
        let manual = full.crop(0, 0, 24, 20).unwrap();
        assert_eq!(stitched.as_u8().unwrap(), manual.as_u8().unwrap());
    }

    #[test]
    fn reflection_indices_mirror_without_repeating_the_edge() {
        let pattern: Vec<usize> = (0..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(pattern, vec![0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(7, 1), 0);
    }

    #[test]
    fn overlap_must_be_even_and_below_half_a_tile() {
        let model = frozen_model();
        let composite = random_composite(32, 32, 7);
        for overlap in [3, 16, 17] {
            assert!(matches!(
                predict_and_stitch(&model, &composite, 32, overlap),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn stitching_picks_the_pixel_farthest_from_a_tile_edge() {
        let model = frozen_model();
        let composite = random_composite(64, 64, 8);
        let stitched = predict_and_stitch(&model, &composite, 32, 8).unwrap();
        // independent re-derivation: infer every window single-shot, then
        // keep the class from the window with the largest edge margin,
        // earlier windows winning ties
        assert_eq!(tile_starts(64, 32, 24), vec![0, 24, 32]);
        let starts = [0usize, 24, 32];
        let mut best = vec![i64::MIN; 64 * 64];
        let mut expected = vec![0u8; 64 * 64];
        for &r0 in &starts {
            for &c0 in &starts {
                let window = composite.crop(r0, c0, 32, 32).unwrap();
                let classes = single_shot_classes(&model, &window);
                for tr in 0..32 {
                    for tc in 0..32 {
                        let margin =
                            [tr, 31 - tr, tc, 31 - tc].into_iter().min().unwrap() as i64;
                        let i = (r0 + tr) * 64 + (c0 + tc);
                        if margin > best[i] {
                            best[i] = margin;
                            expected[i] = classes[tr * 32 + tc];
                        }
                    }
                }
            }
        }
        assert_eq!(stitched.as_u8().unwrap(), &expected[..]);
    }

    #[test]
    fn tile_starts_cover_the_extent_flush_to_the_edge() {
        assert_eq!(tile_starts(32, 32, 32), vec![0]);
        assert_eq!(tile_starts(100, 32, 24), vec![0, 24, 48, 68]);
        assert_eq!(tile_starts(33, 32, 32), vec![0, 1]);
    }
}
