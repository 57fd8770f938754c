//! One function per subcommand. Every command reads/writes files under the
//! workdir, emits a manifest.json into its step directory, and prints a
//! one-line summary to stdout.

use crate::config::PipelineConfig;
use crate::manifest::Manifest;
use crate::report::{history_svg, matrix_csv};
use crate::tiles::{load_tileset, store_tileset, update_splits};
use standseg_core::metrics::{metrics_report, ConfusionMatrix, MetricsReport};
use standseg_core::preprocess::{
    build_chm, rasterize_stands, read_stands, read_xyz, split_dataset,
    stack_composite, stands_to_geojson_string, tile_composite, Split, SplitConfig,
};
use standseg_core::raster::{
    decode_argmax, downsample_block_mean, normalize_composite, read_raster,
    write_raster, ClassScheme, GeoTransform,
};
use standseg_core::trainer::{evaluate_split, train, write_history, EpochRecord};
use standseg_core::tuner::{run_study, TrialJournal, TrialStatus, UnetTrialRunner};
use standseg_core::unet::{
    composite_to_tensor, load_weights, probs_to_raster, save_weights, UNetModel,
};
use standseg_core::vectorize::{apply_mmu, vectorize_classmap};
use standseg_core::{generate_scene, predict_and_stitch, SceneSpec};
use standseg_core::{Error, Result};
use std::path::{Path, PathBuf};

pub struct Context {
    pub config: PipelineConfig,
    pub workdir: PathBuf,
    pub seed: Option<u64>,
}

impl Context {
    fn step_dir(&self, step: &str) -> Result<PathBuf> {
        let dir = self.workdir.join(step);
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn require_file(path: &Path, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Input(format!("{what} not found: {}", path.display())))
    }
}

/// Resolve an input path: explicit flag, else config/pipeline default.
fn resolve(flag: Option<PathBuf>, fallback: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let path = flag
        .or(fallback)
        .ok_or_else(|| Error::Input(format!("no {what} given (flag or config)")))?;
    require_file(&path, what)
}

pub fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Input(format!(
            "unknown split {other:?}, expected train|val|test"
        ))),
    }
}

pub fn parse_fractions(text: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Input(format!("bad fraction {p:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::Input(format!(
            "expected three comma-separated fractions, got {}",
            parts.len()
        )));
    }
    Ok((parts[0], parts[1], parts[2]))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_build_chm(
    ctx: &Context,
    points: Option<PathBuf>,
    like: Option<PathBuf>,
    origin_x: Option<f64>,
    origin_y: Option<f64>,
    cell_size: Option<f64>,
    width: Option<usize>,
    height: Option<usize>,
) -> Result<()> {
    let points_path = resolve(points, ctx.config.paths.points.clone(), "point cloud")?;
    let (grid, w, h, like_path) = if let Some(like) = like {
        let like = require_file(&like, "reference raster")?;
        let r = read_raster(&like)?;
        (*r.transform(), r.width(), r.height(), Some(like))
    } else {
        let missing = || {
            Error::Input(
                "build-chm needs --like or all of --origin-x/--origin-y/--cell-size/--width/--height"
                    .into(),
            )
        };
        let grid = GeoTransform::new(
            origin_x.ok_or_else(missing)?,
            origin_y.ok_or_else(missing)?,
            cell_size.ok_or_else(missing)?,
        )?;
        (grid, width.ok_or_else(missing)?, height.ok_or_else(missing)?, None)
    };
    let cloud = read_xyz(&points_path)?;
    let chm = build_chm(&cloud, grid, w, h)?;
    let dir = ctx.step_dir("chm")?;
    let out = dir.join("chm.rstr");
    write_raster(&chm, &out)?;

    let mut m = Manifest::new("build-chm");
    m.param("width", w)?;
    m.param("height", h)?;
    m.param("cell_size", grid.cell_size)?;
    m.input("points", &points_path)?;
    if let Some(like) = like_path {
        m.input("like", &like)?;
    }
    m.output(&dir, &out)?;
    m.write(&dir)?;
    println!("chm: {} ({}x{} at {} m)", out.display(), w, h, grid.cell_size);
    Ok(())
}

pub fn cmd_downsample(ctx: &Context, input: PathBuf, factor: usize) -> Result<()> {
    let input = require_file(&input, "input raster")?;
    let raster = read_raster(&input)?;
    let down = downsample_block_mean(&raster, factor)?;
    let dir = ctx.step_dir("downsample")?;
    let out = dir.join("downsampled.rstr");
    write_raster(&down, &out)?;

    let mut m = Manifest::new("downsample");
    m.param("factor", factor)?;
    m.input("input", &input)?;
    m.output(&dir, &out)?;
    m.write(&dir)?;
    println!("downsampled: {} ({}x{})", out.display(), down.width(), down.height());
    Ok(())
}

pub fn cmd_stack(
    ctx: &Context,
    spectral: Option<PathBuf>,
    chm: Option<PathBuf>,
    chm_max: Option<f64>,
    raw: bool,
) -> Result<()> {
    let spectral_path = resolve(spectral, ctx.config.paths.orthophoto.clone(), "orthophoto")?;
    let chm_path = resolve(chm, Some(ctx.workdir.join("chm/chm.rstr")), "chm raster")?;
    let chm_max = chm_max.unwrap_or(ctx.config.chm_max);
    let spectral = read_raster(&spectral_path)?;
    let chm = read_raster(&chm_path)?;
    let stacked = stack_composite(&spectral, &chm)?;
    let composite =
        if raw { stacked } else { normalize_composite(&stacked, chm_max)? };
    let dir = ctx.step_dir("stack")?;
    let out = dir.join("composite.rstr");
    write_raster(&composite, &out)?;

    let mut m = Manifest::new("stack");
    m.param("chm_max", chm_max)?;
    m.param("normalized", !raw)?;
    m.input("spectral", &spectral_path)?;
    m.input("chm", &chm_path)?;
    m.output(&dir, &out)?;
    m.write(&dir)?;
    println!("composite: {} ({} bands)", out.display(), composite.bands());
    Ok(())
}

pub fn cmd_tile(
    ctx: &Context,
    composite: Option<PathBuf>,
    stands: Option<PathBuf>,
    size: Option<usize>,
) -> Result<()> {
    let composite_path = resolve(
        composite,
        Some(ctx.workdir.join("stack/composite.rstr")),
        "composite",
    )?;
    let stands_path = resolve(stands, ctx.config.paths.stands.clone(), "stand polygons")?;
    let size = size.unwrap_or(ctx.config.tile_pixels);
    let composite = read_raster(&composite_path)?;
    let polygons = read_stands(&stands_path)?;
    let scheme = ClassScheme::default_stands();
    let mask = rasterize_stands(
        &polygons,
        &scheme,
        *composite.transform(),
        composite.width(),
        composite.height(),
    )?;
    let tileset = tile_composite(&composite, &mask, &scheme, size)?;
    let dir = ctx.step_dir("tiles")?;
    let files = store_tileset(&tileset, &dir)?;

    let mut m = Manifest::new("tile");
    m.param("size", size)?;
    m.param("n_tiles", tileset.tiles.len())?;
    m.input("composite", &composite_path)?;
    m.input("stands", &stands_path)?;
    for f in &files {
        m.output(&dir, f)?;
    }
    m.write(&dir)?;
    println!("tiles: {} ({} of {size}px)", dir.display(), tileset.tiles.len());
    Ok(())
}

pub fn cmd_split(
    ctx: &Context,
    tiles: Option<PathBuf>,
    fractions: Option<String>,
) -> Result<()> {
    let tiles_dir = tiles.unwrap_or_else(|| ctx.workdir.join("tiles"));
    require_file(&tiles_dir.join("tiles.json"), "tile index")?;
    let fractions = match fractions {
        Some(text) => parse_fractions(&text)?,
        None => ctx.config.split.fractions,
    };
    let seed = ctx.seed.unwrap_or(ctx.config.split.seed);
    let split_config = SplitConfig::new(fractions, seed)?;
    let tileset = split_dataset(load_tileset(&tiles_dir)?, &split_config)?;
    update_splits(&tiles_dir, &tileset)?;
    let (n_train, n_val, n_test) = tileset.split_counts();

    let dir = ctx.step_dir("split")?;
    let mut m = Manifest::new("split");
    m.param("fractions", [fractions.0, fractions.1, fractions.2])?;
    m.param("seed", seed)?;
    m.param("counts", [n_train, n_val, n_test])?;
    m.output(&dir, &tiles_dir.join("tiles.json"))?;
    m.write(&dir)?;
    println!("split: {n_train} train / {n_val} val / {n_test} test");
    Ok(())
}

pub fn cmd_train(
    ctx: &Context,
    tiles: Option<PathBuf>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
) -> Result<()> {
    let tiles_dir = tiles.unwrap_or_else(|| ctx.workdir.join("tiles"));
    require_file(&tiles_dir.join("tiles.json"), "tile index")?;
    let tileset = load_tileset(&tiles_dir)?;
    let dir = ctx.step_dir("train")?;
    let mut config = ctx.config.train.clone();
    config.checkpoint_dir = dir.join("checkpoints");
    if let Some(e) = epochs {
        config.max_epochs = e;
    }
    if let Some(b) = batch_size {
        config.batch_size = b;
    }
    if let Some(lr) = learning_rate {
        config.learning_rate = lr;
    }
    if let Some(seed) = ctx.seed {
        config.seed = seed;
    }
    let model = UNetModel::build(ctx.config.model, config.seed)?;
    let outcome = train(model, &tileset, &config)?;

    let history_path = dir.join("history.jsonl");
    write_history(&history_path, &outcome.history)?;
    let best_path = dir.join("best.unw1");
    save_weights(&outcome.best_model, &best_path)?;

    let mut m = Manifest::new("train");
    m.param("max_epochs", config.max_epochs)?;
    m.param("batch_size", config.batch_size)?;
    m.param("learning_rate", config.learning_rate)?;
    m.param("seed", config.seed)?;
    m.param("model", ctx.config.model)?;
    m.param("best_epoch", outcome.best_epoch)?;
    m.param("best_val_mmcc", outcome.best_val_mmcc)?;
    m.input("tiles", &tiles_dir.join("tiles.json"))?;
    m.output(&dir, &history_path)?;
    m.output(&dir, &best_path)?;
    let mut checkpoints: Vec<PathBuf> = std::fs::read_dir(&config.checkpoint_dir)?
        .map(|e| Ok(e?.path()))
        .collect::<Result<_>>()?;
    checkpoints.sort();
    for f in &checkpoints {
        m.output(&dir, f)?;
    }
    m.write(&dir)?;
    println!(
        "trained: best epoch {} val mMCC {:.4} -> {}",
        outcome.best_epoch,
        outcome.best_val_mmcc,
        best_path.display()
    );
    Ok(())
}

pub fn cmd_tune(ctx: &Context, tiles: Option<PathBuf>, trials: u64) -> Result<()> {
    let tiles_dir = tiles.unwrap_or_else(|| ctx.workdir.join("tiles"));
    require_file(&tiles_dir.join("tiles.json"), "tile index")?;
    let tileset = load_tileset(&tiles_dir)?;
    let dir = ctx.step_dir("tune")?;
    let seed = ctx.seed.unwrap_or(ctx.config.train.seed);
    let journal_path = dir.join("journal.jsonl");
    let mut journal = TrialJournal::open(&journal_path)?;
    let mut base_train = ctx.config.train.clone();
    base_train.checkpoint_dir = dir.join("trials");
    let mut runner = UnetTrialRunner {
        tileset: &tileset,
        base_model: ctx.config.model,
        base_train,
        seed,
    };
    run_study(&mut journal, &ctx.config.search, trials, seed, &mut runner)?;

    let best = journal
        .best_complete()
        .ok_or_else(|| Error::Training("no trial completed".into()))?;
    let state = journal.trial(best.0).expect("best trial exists");
    let pruned = journal
        .trials()
        .filter(|s| s.status == TrialStatus::Pruned)
        .count();
    let best_json = serde_json::json!({
        "trial": best.0,
        "val_mmcc": best.1,
        "params": state.params,
    });
    let best_path = dir.join("best.json");
    std::fs::write(
        &best_path,
        serde_json::to_string_pretty(&best_json)
            .map_err(|e| Error::Encoding(format!("best.json: {e}")))?
            + "\n",
    )?;

    let mut m = Manifest::new("tune");
    m.param("trials", trials)?;
    m.param("seed", seed)?;
    m.param("search", &ctx.config.search)?;
    m.param("pruned", pruned)?;
    m.input("tiles", &tiles_dir.join("tiles.json"))?;
    m.output(&dir, &journal_path)?;
    m.output(&dir, &best_path)?;
    m.write(&dir)?;
    println!(
        "tuned: best trial {} val mMCC {:.4} ({pruned} of {trials} pruned)",
        best.0, best.1
    );
    Ok(())
}

fn evaluate_with_mmu(
    model: &UNetModel<f32>,
    tileset: &standseg_core::preprocess::TileSet,
    split: Split,
    min_area_ha: f64,
) -> Result<MetricsReport> {
    let tiles: Vec<_> = tileset.tiles.iter().filter(|t| t.split == Some(split)).collect();
    if tiles.is_empty() {
        return Err(Error::Input(format!("split {split} has no tiles")));
    }
    let n = model.config.n_classes;
    let mut matrix = ConfusionMatrix::new(n);
    for tile in tiles {
        let x = composite_to_tensor::<f32>(&tile.composite)?;
        let probs = model.forward_infer(&x)?;
        let probs_raster = probs_to_raster(
            &probs,
            0,
            *tile.composite.transform(),
            (0..n).map(|c| format!("class{c}")).collect(),
        )?;
        let classes = decode_argmax(&probs_raster)?;
        let merged = apply_mmu(&classes, min_area_ha)?;
        let predicted = merged.as_u8().expect("class raster is u8");
        for (&p, &r) in predicted.iter().zip(&tile.mask.to_class_ids()) {
            matrix.increment(p as usize, r as usize);
        }
    }
    metrics_report(&matrix, &ClassScheme::default_stands())
}

pub fn cmd_evaluate(
    ctx: &Context,
    tiles: Option<PathBuf>,
    weights: Option<PathBuf>,
    split: &str,
    mmu: bool,
    min_area_ha: f64,
) -> Result<()> {
    let tiles_dir = tiles.unwrap_or_else(|| ctx.workdir.join("tiles"));
    require_file(&tiles_dir.join("tiles.json"), "tile index")?;
    let weights_path = resolve(
        weights,
        Some(ctx.workdir.join("train/best.unw1")),
        "model checkpoint",
    )?;
    let split = parse_split(split)?;
    let model = load_weights(&weights_path)?;
    let tileset = load_tileset(&tiles_dir)?;
    let report = if mmu {
        evaluate_with_mmu(&model, &tileset, split, min_area_ha)?
    } else {
        let (_, _, report) = evaluate_split(&model, &tileset, split, &ctx.config.train.loss)?;
        report
    };

    let dir = ctx.step_dir("evaluate")?;
    let metrics_path = dir.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Encoding(format!("metrics.json: {e}")))?
            + "\n",
    )?;
    let csv_path = dir.join("matrix.csv");
    std::fs::write(&csv_path, matrix_csv(&report))?;

    let mut m = Manifest::new("evaluate");
    m.param("split", split.to_string())?;
    m.param("mmu", mmu)?;
    if mmu {
        m.param("min_area_ha", min_area_ha)?;
    }
    m.input("tiles", &tiles_dir.join("tiles.json"))?;
    m.input("weights", &weights_path)?;
    m.output(&dir, &metrics_path)?;
    m.output(&dir, &csv_path)?;
    m.write(&dir)?;
    println!("evaluated {split}: OA {:.4} mMCC {:.4}", report.oa, report.mmcc);
    Ok(())
}

pub fn cmd_predict(
    ctx: &Context,
    composite: Option<PathBuf>,
    weights: Option<PathBuf>,
    tile_pixels: Option<usize>,
    overlap: usize,
) -> Result<()> {
    let composite_path = resolve(
        composite,
        Some(ctx.workdir.join("stack/composite.rstr")),
        "composite",
    )?;
    let weights_path = resolve(
        weights,
        Some(ctx.workdir.join("train/best.unw1")),
        "model checkpoint",
    )?;
    let tile_pixels = tile_pixels.unwrap_or(ctx.config.tile_pixels);
    let composite = read_raster(&composite_path)?;
    let model = load_weights(&weights_path)?;
    let classmap = predict_and_stitch(&model, &composite, tile_pixels, overlap)?;
    let dir = ctx.step_dir("predict")?;
    let out = dir.join("classmap.rstr");
    write_raster(&classmap, &out)?;

    let mut m = Manifest::new("predict");
    m.param("tile_pixels", tile_pixels)?;
    m.param("overlap", overlap)?;
    m.input("composite", &composite_path)?;
    m.input("weights", &weights_path)?;
    m.output(&dir, &out)?;
    m.write(&dir)?;
    println!(
        "classmap: {} ({}x{})",
        out.display(),
        classmap.width(),
        classmap.height()
    );
    Ok(())
}

pub fn cmd_vectorize(
    ctx: &Context,
    classmap: Option<PathBuf>,
    min_area_ha: f64,
) -> Result<()> {
    let classmap_path = resolve(
        classmap,
        Some(ctx.workdir.join("predict/classmap.rstr")),
        "class map",
    )?;
    let raster = read_raster(&classmap_path)?;
    let polygons = vectorize_classmap(&raster, min_area_ha)?;
    let dir = ctx.step_dir("vectorize")?;
    let out = dir.join("stands.geojson");
    std::fs::write(&out, stands_to_geojson_string(&polygons))?;

    let mut m = Manifest::new("vectorize");
    m.param("min_area_ha", min_area_ha)?;
    m.param("n_polygons", polygons.len())?;
    m.input("classmap", &classmap_path)?;
    m.output(&dir, &out)?;
    m.write(&dir)?;
    println!("stands: {} ({} polygons)", out.display(), polygons.len());
    Ok(())
}

fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            serde_json::from_str(line)
                .map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))
        })
        .collect()
}

pub fn cmd_report(
    ctx: &Context,
    history: Option<PathBuf>,
    metrics: Option<PathBuf>,
) -> Result<()> {
    let history_path = resolve(
        history,
        Some(ctx.workdir.join("train/history.jsonl")),
        "training history",
    )?;
    let records = read_history(&history_path)?;
    let svg = history_svg(&records)?;
    let dir = ctx.step_dir("report")?;
    let svg_path = dir.join("history.svg");
    std::fs::write(&svg_path, &svg)?;

    let mut m = Manifest::new("report");
    m.param("epochs", records.len())?;
    m.input("history", &history_path)?;
    m.output(&dir, &svg_path)?;

    // re-emit the evaluation matrix when metrics are available
    let metrics_path = metrics.or_else(|| {
        let default = ctx.workdir.join("evaluate/metrics.json");
        default.is_file().then_some(default)
    });
    if let Some(metrics_path) = metrics_path {
        let metrics_path = require_file(&metrics_path, "metrics report")?;
        let text = std::fs::read_to_string(&metrics_path)?;
        let report: MetricsReport = serde_json::from_str(&text)
            .map_err(|e| Error::Corruption(format!("{}: {e}", metrics_path.display())))?;
        let csv_path = dir.join("matrix.csv");
        std::fs::write(&csv_path, matrix_csv(&report))?;
        m.input("metrics", &metrics_path)?;
        m.output(&dir, &csv_path)?;
    }
    m.write(&dir)?;
    println!("report: {} ({} epochs)", svg_path.display(), records.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_synth(
    ctx: &Context,
    width: usize,
    height: usize,
    n_stands: usize,
    noise: Option<f64>,
    density: Option<f64>,
) -> Result<()> {
    let mut spec = SceneSpec {
        width,
        height,
        n_stands,
        ..SceneSpec::default()
    };
    if let Some(noise) = noise {
        spec.spectral_noise = noise;
    }
    if let Some(density) = density {
        spec.point_density = density;
    }
    if let Some(seed) = ctx.seed {
        spec.seed = seed;
    }
    let scene = generate_scene(&spec)?;
    let dir = ctx.step_dir("synth")?;
    let spectral = dir.join("spectral.rstr");
    let points = dir.join("points.xyz");
    let stands = dir.join("stands.geojson");
    let classes = dir.join("classes.rstr");
    write_raster(&scene.spectral, &spectral)?;
    std::fs::write(&points, standseg_core::preprocess::xyz_to_string(&scene.cloud))?;
    std::fs::write(&stands, stands_to_geojson_string(&scene.polygons))?;
    write_raster(&scene.class_raster, &classes)?;

    let mut m = Manifest::new("synth");
    m.param("spec", &spec)?;
    for out in [&spectral, &points, &stands, &classes] {
        m.output(&dir, out)?;
    }
    m.write(&dir)?;
    println!(
        "scene: {} ({}x{}, {} stands, {} points)",
        dir.display(),
        width,
        height,
        scene.polygons.len(),
        scene.cloud.len()
    );
    Ok(())
}
