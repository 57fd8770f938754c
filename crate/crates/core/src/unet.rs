//! The encoder-decoder segmentation model: topology construction, forward
//! passes, weight serialization (UNW1), and raster/tensor adapters.

use crate::autodiff::{he_init, BnState, Mode, Params, Scalar, Tape, Tensor4, Var};
use crate::error::{Error, Result};
use crate::raster::{ClassMask, GeoTransform, Raster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

const WEIGHTS_MAGIC: &[u8; 4] = b"UNW1";

fn default_in_channels() -> usize {
    5
}

fn default_n_classes() -> usize {
    5
}

fn default_base_filters() -> usize {
    16
}

fn default_filter_size() -> usize {
    3
}

fn default_depth() -> usize {
    4
}

fn default_dropout() -> f64 {
    0.25
}

/// Model hyperparameters. `base_filters` doubles at each of `depth` pooling
/// levels; `filter_size` is the square conv kernel side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    #[serde(default = "default_base_filters")]
    pub base_filters: usize,
    #[serde(default = "default_filter_size")]
    pub filter_size: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            in_channels: default_in_channels(),
            n_classes: default_n_classes(),
            base_filters: default_base_filters(),
            filter_size: default_filter_size(),
            depth: default_depth(),
            dropout_rate: default_dropout(),
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes must be at least 2, got {}",
                self.n_classes
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        if ![3, 5, 7].contains(&self.filter_size) {
            return Err(Error::Config(format!(
                "filter_size must be one of 3, 5, 7, got {}",
                self.filter_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must lie in [0, 0.5], got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn filters_at(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

/// Shape table of every trainable tensor, in topology order. This is the
/// single source of truth for construction and for load-time validation.
fn topology(config: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    let k = config.filter_size;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    // conv + bias + batchnorm scale/shift
    fn bn_conv(specs: &mut Vec<(String, Vec<usize>)>, prefix: &str, idx: usize, cin: usize, cout: usize, k: usize) {
        specs.push((format!("{prefix}.conv{idx}.w"), vec![cout, cin, k, k]));
        specs.push((format!("{prefix}.conv{idx}.b"), vec![cout]));
        specs.push((format!("{prefix}.bn{idx}.scale"), vec![cout]));
        specs.push((format!("{prefix}.bn{idx}.shift"), vec![cout]));
    }
    for level in 0..config.depth {
        let f = config.filters_at(level);
        let cin = if level == 0 { config.in_channels } else { f / 2 };
        let prefix = format!("enc{level}");
        bn_conv(&mut specs, &prefix, 1, cin, f, k);
        bn_conv(&mut specs, &prefix, 2, f, f, k);
    }
    let bottom = config.filters_at(config.depth);
    bn_conv(&mut specs, "bott", 1, bottom / 2, bottom, k);
    bn_conv(&mut specs, "bott", 2, bottom, bottom, k);
    for level in (0..config.depth).rev() {
        let f = config.filters_at(level);
        let prefix = format!("dec{level}");
        specs.push((format!("{prefix}.up.w"), vec![2 * f, f, 2, 2]));
        bn_conv(&mut specs, &prefix, 1, 2 * f, f, k);
        bn_conv(&mut specs, &prefix, 2, f, f, k);
    }
    specs.push(("head.w".into(), vec![config.n_classes, config.base_filters, 1, 1]));
    specs.push(("head.b".into(), vec![config.n_classes]));
    specs
}

fn bn_layer_names(config: &UNetConfig) -> Vec<(String, usize)> {
    let mut names = Vec::new();
    for level in 0..config.depth {
        let f = config.filters_at(level);
        names.push((format!("enc{level}.bn1"), f));
        names.push((format!("enc{level}.bn2"), f));
    }
    let bottom = config.filters_at(config.depth);
    names.push(("bott.bn1".into(), bottom));
    names.push(("bott.bn2".into(), bottom));
    for level in (0..config.depth).rev() {
        let f = config.filters_at(level);
        names.push((format!("dec{level}.bn1"), f));
        names.push((format!("dec{level}.bn2"), f));
    }
    names
}

/// The model: config, named parameters, and per-layer batch-norm running
/// statistics.
#[derive(Debug, Clone)]
pub struct UNetModel<T> {
    pub config: UNetConfig,
    pub params: Params<T>,
    pub bn_states: BTreeMap<String, BnState<T>>,
}

impl<T: Scalar> UNetModel<T> {
    /// Build a freshly initialized model: conv weights He-initialized in
    /// topology order from `seed`, biases and batch-norm shifts zero,
    /// batch-norm scales one.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, shape) in topology(&config) {
            let numel: usize = shape.iter().product();
            let values = if name.ends_with(".w") && shape.len() == 4 {
                if name.contains(".up.") {
                    // transposed conv [cin, cout, 2, 2]
                    he_init(numel, shape[0] * shape[2] * shape[3], &mut rng)?
                } else {
                    // conv [cout, cin, k, k]
                    he_init(numel, shape[1] * shape[2] * shape[3], &mut rng)?
                }
            } else if name.ends_with(".scale") {
                vec![T::one(); numel]
            } else {
                vec![T::zero(); numel]
            };
            params.insert(&name, shape, values)?;
        }
        let bn_states = bn_layer_names(&config)
            .into_iter()
            .map(|(name, channels)| (name, BnState::new(channels)))
            .collect();
        Ok(Self { config, params, bn_states })
    }

    fn check_batch(&self, batch: &Tensor4<T>) -> Result<()> {
        let (_, c, h, w) = batch.dims();
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "batch has {c} channels, model expects {}",
                self.config.in_channels
            )));
        }
        let div = 1usize << self.config.depth;
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {h}x{w} not divisible by 2^depth = {div}"
            )));
        }
        Ok(())
    }

    fn run<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor4<T>,
        bn_states: &mut BTreeMap<String, BnState<T>>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let config = &self.config;
        let params = &self.params;
        let block = |tape: &mut Tape<T>,
                         x: Var,
                         prefix: &str,
                         idx: usize,
                         bn_states: &mut BTreeMap<String, BnState<T>>|
         -> Result<Var> {
            let conv = tape.conv2d(
                x,
                params,
                &format!("{prefix}.conv{idx}.w"),
                &format!("{prefix}.conv{idx}.b"),
            )?;
            let bn_name = format!("{prefix}.bn{idx}");
            let state = bn_states
                .get_mut(&bn_name)
                .ok_or_else(|| Error::Config(format!("missing batchnorm state {bn_name:?}")))?;
            let bn = tape.batchnorm2d(
                conv,
                params,
                &format!("{bn_name}.scale"),
                &format!("{bn_name}.shift"),
                state,
                mode,
            )?;
            Ok(tape.swish(bn))
        };

        let mut x = tape.input(batch.clone());
        let mut skips = Vec::with_capacity(config.depth);
        for level in 0..config.depth {
            let prefix = format!("enc{level}");
            x = block(tape, x, &prefix, 1, bn_states)?;
            x = block(tape, x, &prefix, 2, bn_states)?;
            x = tape.spatial_dropout2d(x, config.dropout_rate, mode, rng)?;
            skips.push(x);
            x = tape.maxpool2(x)?;
        }
        x = block(tape, x, "bott", 1, bn_states)?;
        x = block(tape, x, "bott", 2, bn_states)?;
        x = tape.spatial_dropout2d(x, config.dropout_rate, mode, rng)?;
        for level in (0..config.depth).rev() {
            let prefix = format!("dec{level}");
            x = tape.transposed_conv2d(x, params, &format!("{prefix}.up.w"))?;
            x = tape.concat_channels(x, skips[level])?;
            x = block(tape, x, &prefix, 1, bn_states)?;
            x = block(tape, x, &prefix, 2, bn_states)?;
        }
        let logits = tape.conv2d(x, params, "head.w", "head.b")?;
        Ok(tape.softmax_channels(logits))
    }

    /// Training-mode forward pass; returns the live tape and the probability
    /// output node so the caller can backpropagate a loss gradient. Updates
    /// batch-norm running statistics.
    pub fn forward_train<R: Rng>(
        &mut self,
        batch: &Tensor4<T>,
        rng: &mut R,
    ) -> Result<(Tape<T>, Var)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut bn_states = std::mem::take(&mut self.bn_states);
        let result = self.run(&mut tape, batch, &mut bn_states, Mode::Train, rng);
        self.bn_states = bn_states;
        result.map(|probs| (tape, probs))
    }

    /// Inference-mode forward pass: dropout off, running statistics, no
    /// model mutation. Requires at least one prior training step.
    pub fn forward_infer(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let mut bn_states = self.bn_states.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0); // never drawn from at inference
        let probs = self.run(&mut tape, batch, &mut bn_states, Mode::Infer, &mut rng)?;
        Ok(tape.value(probs).clone())
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct WeightsManifest {
    config: UNetConfig,
    tensors: Vec<TensorEntry>,
    bn_initialized: Vec<String>,
}

fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// All serialized tensors of a model in file order: trainable parameters,
/// then batch-norm running stats.
fn tensor_sequence(model: &UNetModel<f32>) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut seq: Vec<(String, Vec<usize>, Vec<f32>)> = model
        .params
        .iter()
        .map(|(name, p)| (name.clone(), p.shape.clone(), p.values.clone()))
        .collect();
    for (name, state) in &model.bn_states {
        let c = state.running_mean.len();
        seq.push((format!("{name}.running_mean"), vec![c], state.running_mean.clone()));
        seq.push((format!("{name}.running_var"), vec![c], state.running_var.clone()));
    }
    seq
}

/// Serialize a model to UNW1 bytes (deterministic).
pub fn weights_to_bytes(model: &UNetModel<f32>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, values) in tensor_sequence(model) {
        let bytes = f32s_to_bytes(&values);
        tensors.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
            crc32: crc32fast::hash(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let manifest = WeightsManifest {
        config: model.config,
        tensors,
        bn_initialized: model
            .bn_states
            .iter()
            .filter(|(_, s)| s.initialized)
            .map(|(n, _)| n.clone())
            .collect(),
    };
    let manifest_json = serde_json::to_vec(&manifest).expect("manifest serialization");
    let mut out = Vec::with_capacity(8 + manifest_json.len() + payload.len());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&payload);
    out
}

/// Parse a model from UNW1 bytes, validating shapes against the topology
/// implied by the manifest config and every tensor checksum.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<UNetModel<f32>> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the UNW1 preamble".into()));
    }
    if &bytes[0..4] != WEIGHTS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"UNW1\"",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let manifest_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + manifest_len {
        return Err(Error::Corruption("manifest length exceeds file size".into()));
    }
    let manifest: WeightsManifest = serde_json::from_slice(&bytes[8..8 + manifest_len])
        .map_err(|e| Error::Corruption(format!("invalid manifest JSON: {e}")))?;
    let payload = &bytes[8 + manifest_len..];

    let mut model = UNetModel::<f32>::build(manifest.config, 0)?;
    let expected: Vec<(String, Vec<usize>, Vec<f32>)> = tensor_sequence(&model);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Corruption(format!(
            "manifest lists {} tensors, topology implies {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, shape, _)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Corruption(format!(
                "manifest tensor {:?} {:?} does not match topology tensor {name:?} {shape:?}",
                entry.name, entry.shape
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Corruption(format!(
                "payload truncated: tensor {:?} needs bytes {start}..{end}, payload has {}",
                entry.name,
                payload.len()
            )));
        }
        let slice = &payload[start..end];
        if crc32fast::hash(slice) != entry.crc32 {
            return Err(Error::Corruption(format!(
                "checksum mismatch for tensor {:?}",
                entry.name
            )));
        }
        let values: Vec<f32> = slice
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(state_name) = entry.name.strip_suffix(".running_mean") {
            model.bn_states.get_mut(state_name).unwrap().running_mean = values;
        } else if let Some(state_name) = entry.name.strip_suffix(".running_var") {
            model.bn_states.get_mut(state_name).unwrap().running_var = values;
        } else {
            model.params.get_mut(&entry.name)?.values = values;
        }
    }
    for name in &manifest.bn_initialized {
        model
            .bn_states
            .get_mut(name)
            .ok_or_else(|| Error::Corruption(format!("unknown batchnorm state {name:?}")))?
            .initialized = true;
    }
    Ok(model)
}

/// Write model weights to disk.
pub fn save_weights(model: &UNetModel<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, weights_to_bytes(model))?;
    Ok(())
}

/// Read model weights from disk.
pub fn load_weights(path: &Path) -> Result<UNetModel<f32>> {
    weights_from_bytes(&std::fs::read(path)?)
}

/// View a composite raster as a single-sample batch tensor.
pub fn composite_to_tensor<T: Scalar>(raster: &Raster) -> Result<Tensor4<T>> {
    let data = raster
        .as_f32()
        .ok_or_else(|| Error::Shape("composite must be float32".into()))?;
    Tensor4::new(
        (1, raster.bands(), raster.height(), raster.width()),
        data.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// View a one-hot mask as a single-sample batch tensor of 0/1 values.
pub fn mask_to_tensor<T: Scalar>(mask: &ClassMask) -> Tensor4<T> {
    Tensor4::from_raw(
        (1, mask.n_classes(), mask.height(), mask.width()),
        mask.layers().iter().map(|&v| T::from_f64(v as f64)).collect(),
    )
}

/// Stack per-tile composites and masks into batch tensors.
pub fn batch_tensors<T: Scalar>(
    pairs: &[(&Raster, &ClassMask)],
) -> Result<(Tensor4<T>, Tensor4<T>)> {
    if pairs.is_empty() {
        return Err(Error::Input("cannot batch zero tiles".into()));
    }
    let (first_comp, first_mask) = pairs[0];
    let (c, h, w) = (first_comp.bands(), first_comp.height(), first_comp.width());
    let n_classes = first_mask.n_classes();
    let mut xs = Vec::with_capacity(pairs.len() * c * h * w);
    let mut ms = Vec::with_capacity(pairs.len() * n_classes * h * w);
    for (comp, mask) in pairs {
        if comp.bands() != c || comp.height() != h || comp.width() != w {
            return Err(Error::Shape("tiles in a batch must share dims".into()));
        }
        let data = comp
            .as_f32()
            .ok_or_else(|| Error::Shape("composite must be float32".into()))?;
        xs.extend(data.iter().map(|&v| T::from_f64(v as f64)));
        if mask.n_classes() != n_classes || mask.height() != h || mask.width() != w {
            return Err(Error::Shape("masks in a batch must share dims".into()));
        }
        ms.extend(mask.layers().iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok((
        Tensor4::new((pairs.len(), c, h, w), xs)?,
        Tensor4::from_raw((pairs.len(), n_classes, h, w), ms),
    ))
}

/// Convert one sample of a probability tensor back to a multi-band raster.
pub fn probs_to_raster(
    probs: &Tensor4<f32>,
    sample: usize,
    transform: GeoTransform,
    band_names: Vec<String>,
) -> Result<Raster> {
    let (n, c, h, w) = probs.dims();
    if sample >= n {
        return Err(Error::Shape(format!("sample {sample} out of batch of {n}")));
    }
    let plane = c * h * w;
    Raster::new_f32(
        w,
        h,
        c,
        transform,
        band_names,
        None,
        probs.data()[sample * plane..(sample + 1) * plane].to_vec(),
    )
}
