//! Core algorithms for the forest stand segmentation pipeline: raster I/O,
//! preprocessing, a small reverse-mode autodiff engine, the U-Net model,
//! losses and metrics, training and tuning loops, and synthetic scene
//! generation.

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod numeric;
pub mod preprocess;
pub mod raster;
pub mod predict;
pub mod synthgen;
pub mod trainer;
pub mod tuner;
pub mod unet;
pub mod vectorize;

pub use augment::{
    add_gaussian_noise, adjust_brightness_contrast, augment_batch, augment_tile, hflip,
    AugmentConfig,
};
pub use autodiff::{
    adam_step, he_init, BnState, Mode, Parameter, Params, Scalar, Tape, Tensor4, Var,
};
pub use error::{Error, Result};
pub use loss::{
    focal_component, focal_tversky_loss, focal_tversky_loss_with_grad, soft_class_counts,
    tversky_index, ClassCounts, LossParams, TVERSKY_SMOOTH,
};
pub use metrics::{
    confusion_matrix, macro_mcc, mcc_binary, metrics_report, normalize_matrix, overall_accuracy,
    producers_accuracy, users_accuracy, ClassMetrics, ConfusionMatrix, MetricsReport,
};
pub use preprocess::{
    assign_splits, build_chm, parse_stands_geojson, parse_xyz, rasterize_stands, read_stands,
    read_xyz, split_dataset, stack_composite, stands_to_geojson_string, tile_composite,
    xyz_to_string, Point3, Split, SplitConfig, StandPolygon, Tile, TileSet, STAGE_MERGE,
    STAGE_UNMERGE,
};
pub use raster::{
    decode_argmax, downsample_block_mean, normalize_composite, one_hot_encode, raster_from_bytes,
    raster_to_bytes, read_raster, write_raster, ClassMask, ClassScheme, GeoTransform, Raster,
    RasterData, UNLABELED,
};
pub use trainer::{
    best_epoch, evaluate_split, read_history, train, train_with_callback, write_history,
    EpochRecord, TrainConfig, TrainOutcome,
};
pub use tuner::{
    run_study, sample_params, should_prune, JournalEvent, SampledParams, SearchSpace,
    TrialJournal, TrialRunner, TrialState, TrialStatus, UnetTrialRunner, PRUNE_WARMUP_EPOCHS,
    PRUNE_WARMUP_TRIALS,
};
pub use predict::predict_and_stitch;
pub use synthgen::{generate_scene, scene_to_tileset, Scene, SceneSpec};
pub use vectorize::{apply_mmu, vectorize_classmap};
pub use unet::{
    batch_tensors, composite_to_tensor, load_weights, mask_to_tensor, probs_to_raster,
    save_weights, weights_from_bytes, weights_to_bytes, UNetConfig, UNetModel,
};
