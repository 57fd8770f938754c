//! Reverse-mode tape over [`Tensor4`] with the layer set the U-Net needs.
//!
//! A [`Tape`] records one forward graph; `backward` walks it in reverse,
//! accumulating gradients for tape inputs and for named parameters in a
//! [`Params`] registry. Tapes are cheap and rebuilt per batch.
//!
//! Every op's output elements are computed independently with a fixed
//! per-element summation order, so data-parallel execution cannot change
//! results.

use crate::autodiff::params::Params;
use crate::autodiff::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};
use rand::Rng;
use rayon::prelude::*;

/// Forward-pass mode: training (batch statistics, live dropout) or
/// inference (running statistics, dropout off).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-layer batch-norm running statistics, owned by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> BnState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.99;

enum NodeOp<T> {
    Input,
    Conv2d {
        x: usize,
        w: Vec<T>,
        cout: usize,
        cin: usize,
        k: usize,
        wname: String,
        bname: String,
    },
    TransposedConv2d {
        x: usize,
        w: Vec<T>,
        cin: usize,
        cout: usize,
        wname: String,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: usize,
        scale: Vec<T>,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        sname: String,
        bname: String,
    },
    SpatialDropout {
        x: usize,
        keep: Vec<bool>,
        scale: T,
    },
    Swish {
        x: usize,
    },
    SoftmaxChannels {
        x: usize,
    },
    ConcatChannels {
        a: usize,
        b: usize,
    },
}

struct Node<T> {
    op: NodeOp<T>,
    out: Tensor4<T>,
}

/// One recorded forward graph.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: NodeOp<T>, out: Tensor4<T>) -> Var {
        self.nodes.push(Node { op, out });
        Var(self.nodes.len() - 1)
    }

    /// Register an input tensor (a leaf).
    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.push(NodeOp::Input, t)
    }

    /// Output values of a node.
    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].out
    }

    /// Gradient of the last backward pass w.r.t. a node's output, if that
    /// node was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Same-padded cross-correlation with bias. Weights `[cout, cin, k, k]`
    /// and bias `[cout]` come from `params` under the given names; k must be
    /// odd. Per output element the summation order is ci, then ky, then kx,
    /// skipping out-of-range taps.
    pub fn conv2d(&mut self, x: Var, params: &Params<T>, wname: &str, bname: &str) -> Result<Var> {
        let (n, cin_x, h, w_dim) = self.nodes[x.0].out.dims();
        let wp = params.get(wname)?;
        let bp = params.get(bname)?;
        if wp.shape.len() != 4 || wp.shape[2] != wp.shape[3] {
            return Err(Error::Shape(format!(
                "conv weights {wname:?} must be [cout, cin, k, k], got {:?}",
                wp.shape
            )));
        }
        let (cout, cin, k) = (wp.shape[0], wp.shape[1], wp.shape[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel size must be odd for same padding, got {k}"
            )));
        }
        if cin != cin_x {
            return Err(Error::Shape(format!(
                "conv weights {wname:?} expect {cin} input channels, input has {cin_x}"
            )));
        }
        if bp.shape != [cout] {
            return Err(Error::Shape(format!(
                "conv bias {bname:?} must be [{cout}], got {:?}",
                bp.shape
            )));
        }
        let weights = wp.values.clone();
        let bias = bp.values.clone();
        let input = &self.nodes[x.0].out;
        let in_data = input.data();
        let pad = (k - 1) / 2;
        let mut out = vec![T::zero(); n * cout * h * w_dim];
        // Row-wise accumulation in (ci, ky, kx) order: per output slot this is
        // the same tap order as the naive per-pixel triple loop (so results
        // are bit-identical), but the inner loop is a branch-free slice walk
        // the compiler can vectorize.
        out.par_chunks_mut(w_dim).enumerate().for_each(|(row, chunk)| {
            let y = row % h;
            let co = (row / h) % cout;
            let nb = row / (h * cout);
            for ci in 0..cin {
                for ky in 0..k {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let irow = &in_data[((nb * cin + ci) * h + (iy - pad)) * w_dim..][..w_dim];
                    let wrow = &weights[((co * cin + ci) * k + ky) * k..][..k];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        // valid ox where ox + kx - pad lands inside the row
                        let lo = pad.saturating_sub(kx);
                        let hi = (w_dim + pad).saturating_sub(kx).min(w_dim);
                        if lo >= hi {
                            continue;
                        }
                        let src = &irow[lo + kx - pad..hi + kx - pad];
                        for (slot, &v) in chunk[lo..hi].iter_mut().zip(src) {
                            *slot = *slot + wv * v;
                        }
                    }
                }
            }
            let b = bias[co];
            for slot in chunk.iter_mut() {
                *slot = *slot + b;
            }
        });
        Ok(self.push(
            NodeOp::Conv2d {
                x: x.0,
                w: weights,
                cout,
                cin,
                k,
                wname: wname.to_string(),
                bname: bname.to_string(),
            },
            Tensor4::from_raw((n, cout, h, w_dim), out),
        ))
    }

    /// Stride-2 transposed convolution with a fixed 2x2 kernel, exactly
    /// doubling spatial dims. Weights `[cin, cout, 2, 2]`, no bias.
    pub fn transposed_conv2d(&mut self, x: Var, params: &Params<T>, wname: &str) -> Result<Var> {
        let (n, cin_x, h, w_dim) = self.nodes[x.0].out.dims();
        let wp = params.get(wname)?;
        if wp.shape.len() != 4 || wp.shape[2] != 2 || wp.shape[3] != 2 {
            return Err(Error::Shape(format!(
                "transposed-conv weights {wname:?} must be [cin, cout, 2, 2], got {:?}",
                wp.shape
            )));
        }
        let (cin, cout) = (wp.shape[0], wp.shape[1]);
        if cin != cin_x {
            return Err(Error::Shape(format!(
                "transposed-conv weights {wname:?} expect {cin} input channels, input has {cin_x}"
            )));
        }
        let weights = wp.values.clone();
        let input = &self.nodes[x.0].out;
        let in_data = input.data();
        let (oh, ow) = (2 * h, 2 * w_dim);
        let mut out = vec![T::zero(); n * cout * oh * ow];
        // per output slot the taps accumulate in ascending-ci order, matching
        // the naive per-pixel loop bit for bit
        out.par_chunks_mut(ow).enumerate().for_each(|(row, chunk)| {
            let oy = row % oh;
            let co = (row / oh) % cout;
            let nb = row / (oh * cout);
            let (y, ky) = (oy / 2, oy % 2);
            for ci in 0..cin {
                let xrow = &in_data[((nb * cin + ci) * h + y) * w_dim..][..w_dim];
                let wbase = ((ci * cout + co) * 2 + ky) * 2;
                let (w0, w1) = (weights[wbase], weights[wbase + 1]);
                for (pair, &xv) in chunk.chunks_exact_mut(2).zip(xrow) {
                    pair[0] = pair[0] + xv * w0;
                    pair[1] = pair[1] + xv * w1;
                }
            }
        });
        Ok(self.push(
            NodeOp::TransposedConv2d {
                x: x.0,
                w: weights,
                cin,
                cout,
                wname: wname.to_string(),
            },
            Tensor4::from_raw((n, cout, oh, ow), out),
        ))
    }

    /// 2x2 max pooling with stride 2. Gradient routes to the argmax element;
    /// ties go to the first position in row-major block order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w_dim) = self.nodes[x.0].out.dims();
        if h % 2 != 0 || w_dim % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial dims, got {h}x{w_dim}"
            )));
        }
        let input = &self.nodes[x.0].out;
        let (oh, ow) = (h / 2, w_dim / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        out.par_chunks_mut(ow)
            .zip(argmax.par_chunks_mut(ow))
            .enumerate()
            .for_each(|(row, (ochunk, achunk))| {
                let oy = row % oh;
                let ch = (row / oh) % c;
                let nb = row / (oh * c);
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = input.at(nb, ch, 2 * oy + dy, 2 * ox + dx);
                            if v > best {
                                best = v;
                                best_idx = input.idx(nb, ch, 2 * oy + dy, 2 * ox + dx) as u32;
                            }
                        }
                    }
                    ochunk[ox] = best;
                    achunk[ox] = best_idx;
                }
            });
        Ok(self.push(
            NodeOp::MaxPool2 { x: x.0, argmax },
            Tensor4::from_raw((n, c, oh, ow), out),
        ))
    }

    /// Batch normalization over (batch, height, width) per channel with
    /// epsilon 1e-5. Train mode standardizes with batch statistics
    /// (population variance) and folds them into the running stats with
    /// momentum 0.99; infer mode uses the running stats and requires them to
    /// be initialized.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        params: &Params<T>,
        scale_name: &str,
        shift_name: &str,
        state: &mut BnState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let (n, c, h, w_dim) = self.nodes[x.0].out.dims();
        let sp = params.get(scale_name)?;
        let bp = params.get(shift_name)?;
        if sp.shape != [c] || bp.shape != [c] {
            return Err(Error::Shape(format!(
                "batchnorm scale/shift must be [{c}], got {:?} and {:?}",
                sp.shape, bp.shape
            )));
        }
        if state.running_mean.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm state holds {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let m = n * h * w_dim;
        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::Shape(format!(
                        "batchnorm training needs at least 2 values per channel, got {m}"
                    )));
                }
                let input = &self.nodes[x.0].out;
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                mean.par_iter_mut().zip(var.par_iter_mut()).enumerate().for_each(
                    |(ch, (mu, va))| {
                        let mut acc = 0f64;
                        for nb in 0..n {
                            for y in 0..h {
                                for xcol in 0..w_dim {
                                    acc += input.at(nb, ch, y, xcol).to_f64();
                                }
                            }
                        }
                        let mu64 = acc / m as f64;
                        let mut acc2 = 0f64;
                        for nb in 0..n {
                            for y in 0..h {
                                for xcol in 0..w_dim {
                                    let d = input.at(nb, ch, y, xcol).to_f64() - mu64;
                                    acc2 += d * d;
                                }
                            }
                        }
                        *mu = T::from_f64(mu64);
                        *va = T::from_f64(acc2 / m as f64);
                    },
                );
                let momentum = T::from_f64(BN_MOMENTUM);
                let one = T::one();
                if state.initialized {
                    for ch in 0..c {
                        state.running_mean[ch] =
                            momentum * state.running_mean[ch] + (one - momentum) * mean[ch];
                        state.running_var[ch] =
                            momentum * state.running_var[ch] + (one - momentum) * var[ch];
                    }
                } else {
                    state.running_mean.copy_from_slice(&mean);
                    state.running_var.copy_from_slice(&var);
                    state.initialized = true;
                }
                (mean, var)
            }
            Mode::Infer => {
                if !state.initialized {
                    return Err(Error::State(
                        "batchnorm inference before any training step: running statistics are uninitialized"
                            .into(),
                    ));
                }
                (state.running_mean.clone(), state.running_var.clone())
            }
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(BN_EPS)).sqrt())
            .collect();
        let input = &self.nodes[x.0].out;
        let scale = sp.values.clone();
        let shift = bp.values.clone();
        let mut out = vec![T::zero(); n * c * h * w_dim];
        out.par_chunks_mut(w_dim).enumerate().for_each(|(row, chunk)| {
            let y = row % h;
            let ch = (row / h) % c;
            let nb = row / (h * c);
            for (xcol, slot) in chunk.iter_mut().enumerate() {
                let xhat = (input.at(nb, ch, y, xcol) - mean[ch]) * inv_std[ch];
                *slot = scale[ch] * xhat + shift[ch];
            }
        });
        Ok(self.push(
            NodeOp::BatchNorm {
                x: x.0,
                scale,
                mean,
                inv_std,
                train: mode == Mode::Train,
                sname: scale_name.to_string(),
                bname: shift_name.to_string(),
            },
            Tensor4::from_raw((n, c, h, w_dim), out),
        ))
    }

    /// Spatial dropout: in train mode each (sample, channel) plane is zeroed
    /// independently with probability `rate` and survivors are scaled by
    /// 1/(1-rate); in infer mode this is the identity.
    pub fn spatial_dropout2d<R: Rng>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let (n, c, _, _) = self.nodes[x.0].out.dims();
        if mode == Mode::Infer || rate == 0.0 {
            Self::validate_rate(rate)?;
            return self.dropout_with_keep(x, vec![true; n * c], T::one());
        }
        let keep: Vec<bool> = (0..n * c).map(|_| rng.random::<f64>() >= rate).collect();
        self.spatial_dropout2d_masked(x, rate, keep)
    }

    /// Dropout with an explicit keep mask of length batch*channels; entry
    /// (n, c) is at `n*channels + c`.
    pub fn spatial_dropout2d_masked(&mut self, x: Var, rate: f64, keep: Vec<bool>) -> Result<Var> {
        Self::validate_rate(rate)?;
        let (n, c, _, _) = self.nodes[x.0].out.dims();
        if keep.len() != n * c {
            return Err(Error::Shape(format!(
                "dropout mask has {} entries for {n} samples x {c} channels",
                keep.len()
            )));
        }
        let scale = T::from_f64(1.0 / (1.0 - rate));
        self.dropout_with_keep(x, keep, scale)
    }

    fn validate_rate(rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(())
    }

    fn dropout_with_keep(&mut self, x: Var, keep: Vec<bool>, scale: T) -> Result<Var> {
        let (n, c, h, w_dim) = self.nodes[x.0].out.dims();
        let input = &self.nodes[x.0].out;
        let plane = h * w_dim;
        let mut out = vec![T::zero(); n * c * plane];
        out.par_chunks_mut(plane).enumerate().for_each(|(pc, chunk)| {
            if keep[pc] {
                let start = pc * plane;
                for (i, slot) in chunk.iter_mut().enumerate() {
                    *slot = input.data()[start + i] * scale;
                }
            }
        });
        Ok(self.push(
            NodeOp::SpatialDropout { x: x.0, keep, scale },
            Tensor4::from_raw((n, c, h, w_dim), out),
        ))
    }

    /// Elementwise swish: x * sigmoid(x).
    pub fn swish(&mut self, x: Var) -> Var {
        let input = &self.nodes[x.0].out;
        let dims = input.dims();
        let mut out = vec![T::zero(); input.numel()];
        out.par_iter_mut().zip(input.data().par_iter()).for_each(|(slot, &v)| {
            *slot = v * sigmoid(v);
        });
        self.push(NodeOp::Swish { x: x.0 }, Tensor4::from_raw(dims, out))
    }

    /// Per-pixel softmax across channels with max-subtraction stabilization.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let input = &self.nodes[x.0].out;
        let (n, c, h, w_dim) = input.dims();
        let mut out = vec![T::zero(); input.numel()];
        let plane = h * w_dim;
        out.par_chunks_mut(plane * c).enumerate().for_each(|(nb, sample)| {
            for p in 0..plane {
                let mut maxv = T::neg_infinity();
                for ch in 0..c {
                    maxv = maxv.max(input.data()[(nb * c + ch) * plane + p]);
                }
                let mut denom = T::zero();
                for ch in 0..c {
                    let e = (input.data()[(nb * c + ch) * plane + p] - maxv).exp();
                    sample[ch * plane + p] = e;
                    denom += e;
                }
                for ch in 0..c {
                    sample[ch * plane + p] /= denom;
                }
            }
        });
        self.push(
            NodeOp::SoftmaxChannels { x: x.0 },
            Tensor4::from_raw((n, c, h, w_dim), out),
        )
    }

    /// Concatenate two tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.nodes[a.0].out.dims();
        let (nb, cb, hb, wb) = self.nodes[b.0].out.dims();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat operands disagree outside the channel axis: {:?} vs {:?}",
                self.nodes[a.0].out.dims(),
                self.nodes[b.0].out.dims()
            )));
        }
        let plane = ha * wa;
        let mut out = vec![T::zero(); na * (ca + cb) * plane];
        let ta = &self.nodes[a.0].out;
        let tb = &self.nodes[b.0].out;
        for n in 0..na {
            let dst = n * (ca + cb) * plane;
            out[dst..dst + ca * plane]
                .copy_from_slice(&ta.data()[n * ca * plane..(n + 1) * ca * plane]);
            out[dst + ca * plane..dst + (ca + cb) * plane]
                .copy_from_slice(&tb.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        Ok(self.push(
            NodeOp::ConcatChannels { a: a.0, b: b.0 },
            Tensor4::from_raw((na, ca + cb, ha, wa), out),
        ))
    }

    /// Reverse pass from `from`, seeded with dL/d(from). Parameter gradients
    /// accumulate into `params`; input/node gradients stay readable through
    /// [`Tape::grad`].
    pub fn backward(&mut self, from: Var, seed: Tensor4<T>, params: &mut Params<T>) -> Result<()> {
        if seed.dims() != self.nodes[from.0].out.dims() {
            return Err(Error::Shape(format!(
                "seed gradient dims {:?} do not match node output {:?}",
                seed.dims(),
                self.nodes[from.0].out.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[from.0] = Some(seed.into_data());
        for i in (0..=from.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                NodeOp::Input => {}
                NodeOp::Conv2d { x, w, cout, cin, k, wname, bname } => {
                    let (dx, dw, db) =
                        conv2d_backward(&self.nodes[*x].out, w, *cout, *cin, *k, &g);
                    accumulate(&mut grads, *x, dx);
                    params.accumulate_grad(wname, &dw)?;
                    params.accumulate_grad(bname, &db)?;
                }
                NodeOp::TransposedConv2d { x, w, cin, cout, wname } => {
                    let (dx, dw) =
                        transposed_conv2d_backward(&self.nodes[*x].out, w, *cin, *cout, &g);
                    accumulate(&mut grads, *x, dx);
                    params.accumulate_grad(wname, &dw)?;
                }
                NodeOp::MaxPool2 { x, argmax } => {
                    let mut dx = vec![T::zero(); self.nodes[*x].out.numel()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g[o];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                NodeOp::BatchNorm { x, scale, mean, inv_std, train, sname, bname } => {
                    let (dx, dscale, dshift) =
                        batchnorm_backward(&self.nodes[*x].out, scale, mean, inv_std, *train, &g);
                    accumulate(&mut grads, *x, dx);
                    params.accumulate_grad(sname, &dscale)?;
                    params.accumulate_grad(bname, &dshift)?;
                }
                NodeOp::SpatialDropout { x, keep, scale } => {
                    let plane = {
                        let (_, _, h, w) = self.nodes[i].out.dims();
                        h * w
                    };
                    let mut dx = vec![T::zero(); g.len()];
                    for (pc, &kept) in keep.iter().enumerate() {
                        if kept {
                            for p in 0..plane {
                                dx[pc * plane + p] = g[pc * plane + p] * *scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                NodeOp::Swish { x } => {
                    let input = &self.nodes[*x].out;
                    let mut dx = vec![T::zero(); g.len()];
                    dx.par_iter_mut().enumerate().for_each(|(j, slot)| {
                        let v = input.data()[j];
                        let s = sigmoid(v);
                        *slot = g[j] * (s + v * s * (T::one() - s));
                    });
                    accumulate(&mut grads, *x, dx);
                }
                NodeOp::SoftmaxChannels { x } => {
                    let y = &self.nodes[i].out;
                    let (_, c, h, w_dim) = y.dims();
                    let plane = h * w_dim;
                    let mut dx = vec![T::zero(); g.len()];
                    dx.par_chunks_mut(c * plane).enumerate().for_each(|(nb, sample)| {
                        for p in 0..plane {
                            let mut dot = T::zero();
                            for ch in 0..c {
                                let j = (nb * c + ch) * plane + p;
                                dot += g[j] * y.data()[j];
                            }
                            for ch in 0..c {
                                let j = (nb * c + ch) * plane + p;
                                sample[ch * plane + p] = y.data()[j] * (g[j] - dot);
                            }
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                NodeOp::ConcatChannels { a, b } => {
                    let (n, ca, h, w_dim) = self.nodes[*a].out.dims();
                    let cb = self.nodes[*b].out.channels();
                    let plane = h * w_dim;
                    let mut da = vec![T::zero(); n * ca * plane];
                    let mut db = vec![T::zero(); n * cb * plane];
                    for nb in 0..n {
                        let src = nb * (ca + cb) * plane;
                        da[nb * ca * plane..(nb + 1) * ca * plane]
                            .copy_from_slice(&g[src..src + ca * plane]);
                        db[nb * cb * plane..(nb + 1) * cb * plane]
                            .copy_from_slice(&g[src + ca * plane..src + (ca + cb) * plane]);
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    // evaluate on the side that keeps exp() from overflowing
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], idx: usize, contribution: Vec<T>) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(contribution) {
                *a += b;
            }
        }
        slot => *slot = Some(contribution),
    }
}

fn conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weights: &[T],
    cout: usize,
    cin: usize,
    k: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, _, h, w_dim) = input.dims();
    let pad = (k - 1) / 2;
    let out_plane = h * w_dim;

    // dx: row-wise accumulation in (co, ky, kx) order per input slot —
    // bit-identical to the naive per-pixel loop, vectorizable over x
    let mut dx = vec![T::zero(); input.numel()];
    dx.par_chunks_mut(w_dim).enumerate().for_each(|(row, chunk)| {
        let iy = row % h;
        let ci = (row / h) % cin;
        let nb = row / (h * cin);
        for co in 0..cout {
            for ky in 0..k {
                let oy = iy + pad;
                if oy < ky || oy - ky >= h {
                    continue;
                }
                let grow = &g[((nb * cout + co) * h + (oy - ky)) * w_dim..][..w_dim];
                let wrow = &weights[((co * cin + ci) * k + ky) * k..][..k];
                for (kx, &wv) in wrow.iter().enumerate() {
                    // valid ix where ix + pad - kx lands inside the row
                    let lo = kx.saturating_sub(pad);
                    let hi = (w_dim + kx).saturating_sub(pad).min(w_dim);
                    if lo >= hi {
                        continue;
                    }
                    let src = &grow[lo + pad - kx..hi + pad - kx];
                    for (slot, &v) in chunk[lo..hi].iter_mut().zip(src) {
                        *slot = *slot + wv * v;
                    }
                }
            }
        }
    });

    // dw: one streaming pass over g and x per (co, ci) pair with k*k running
    // accumulators, instead of a full-tensor pass per weight. Each weight's
    // taps still arrive in ascending (nb, y, ox) order, so sums are
    // bit-identical to the per-weight loop.
    let in_data = input.data();
    let mut dw = vec![T::zero(); cout * cin * k * k];
    dw.par_chunks_mut(k * k).enumerate().for_each(|(pair, wchunk)| {
        let ci = pair % cin;
        let co = pair / cin;
        let mut accs = vec![T::zero(); k * k];
        for nb in 0..n {
            for y in 0..h {
                let grow = &g[((nb * cout + co) * h + y) * w_dim..][..w_dim];
                for ky in 0..k {
                    let iy = y + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let xrow = &in_data[((nb * cin + ci) * h + (iy - pad)) * w_dim..][..w_dim];
                    for kx in 0..k {
                        let lo = pad.saturating_sub(kx);
                        let hi = (w_dim + pad).saturating_sub(kx).min(w_dim);
                        if lo >= hi {
                            continue;
                        }
                        let acc = &mut accs[ky * k + kx];
                        for (&gv, &xv) in grow[lo..hi].iter().zip(&xrow[lo + kx - pad..hi + kx - pad]) {
                            *acc = *acc + gv * xv;
                        }
                    }
                }
            }
        }
        wchunk.copy_from_slice(&accs);
    });

    let mut db = vec![T::zero(); cout];
    db.par_iter_mut().enumerate().for_each(|(co, slot)| {
        let mut acc = T::zero();
        for nb in 0..n {
            for &gv in &g[(nb * cout + co) * out_plane..][..out_plane] {
                acc += gv;
            }
        }
        *slot = acc;
    });

    (dx, dw, db)
}

fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor4<T>,
    weights: &[T],
    cin: usize,
    cout: usize,
    g: &[T],
) -> (Vec<T>, Vec<T>) {
    let (n, _, h, w_dim) = input.dims();
    let (oh, ow) = (2 * h, 2 * w_dim);
    let out_plane = oh * ow;

    // dx: per input slot the taps accumulate in (co, ky, kx) order, matching
    // the naive per-pixel loop bit for bit
    let mut dx = vec![T::zero(); input.numel()];
    dx.par_chunks_mut(w_dim).enumerate().for_each(|(row, chunk)| {
        let y = row % h;
        let ci = (row / h) % cin;
        let nb = row / (h * cin);
        for co in 0..cout {
            for ky in 0..2 {
                let grow = &g[(nb * cout + co) * out_plane + (2 * y + ky) * ow..][..ow];
                for kx in 0..2 {
                    let wv = weights[((ci * cout + co) * 2 + ky) * 2 + kx];
                    for (slot, &gv) in chunk.iter_mut().zip(grow[kx..].iter().step_by(2)) {
                        *slot = *slot + gv * wv;
                    }
                }
            }
        }
    });

    // dw: one streaming pass per (ci, co) pair with the four kernel taps as
    // running accumulators; per weight the taps still arrive in ascending
    // (nb, y, x) order, so sums are bit-identical to the per-weight loop
    let in_data = input.data();
    let mut dw = vec![T::zero(); cin * cout * 4];
    dw.par_chunks_mut(4).enumerate().for_each(|(pair, wchunk)| {
        let co = pair % cout;
        let ci = pair / cout;
        let mut accs = [T::zero(); 4];
        for nb in 0..n {
            for y in 0..h {
                let xrow = &in_data[((nb * cin + ci) * h + y) * w_dim..][..w_dim];
                for ky in 0..2 {
                    let grow = &g[(nb * cout + co) * out_plane + (2 * y + ky) * ow..][..ow];
                    for kx in 0..2 {
                        let acc = &mut accs[ky * 2 + kx];
                        for (&xv, &gv) in xrow.iter().zip(grow[kx..].iter().step_by(2)) {
                            *acc = *acc + xv * gv;
                        }
                    }
                }
            }
        }
        wchunk.copy_from_slice(&accs);
    });

    (dx, dw)
}

fn batchnorm_backward<T: Scalar>(
    input: &Tensor4<T>,
    scale: &[T],
    mean: &[T],
    inv_std: &[T],
    train: bool,
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w_dim) = input.dims();
    let plane = h * w_dim;
    let m = T::from_f64((n * plane) as f64);

    // per-channel reductions, computed sequentially per channel for a fixed
    // summation order
    let mut sum_g = vec![T::zero(); c];
    let mut sum_g_xhat = vec![T::zero(); c];
    sum_g
        .par_iter_mut()
        .zip(sum_g_xhat.par_iter_mut())
        .enumerate()
        .for_each(|(ch, (sg, sgx))| {
            for nb in 0..n {
                for p in 0..plane {
                    let j = (nb * c + ch) * plane + p;
                    let xhat = (input.data()[j] - mean[ch]) * inv_std[ch];
                    *sg += g[j];
                    *sgx += g[j] * xhat;
                }
            }
        });

    let mut dx = vec![T::zero(); input.numel()];
    dx.par_chunks_mut(plane).enumerate().for_each(|(pc, chunk)| {
        let ch = pc % c;
        let nb = pc / c;
        for (p, slot) in chunk.iter_mut().enumerate() {
            let j = (nb * c + ch) * plane + p;
            if train {
                let xhat = (input.data()[j] - mean[ch]) * inv_std[ch];
                *slot = scale[ch] * inv_std[ch] / m
                    * (m * g[j] - sum_g[ch] - xhat * sum_g_xhat[ch]);
            } else {
                // running stats are constants at inference
                *slot = g[j] * scale[ch] * inv_std[ch];
            }
        }
    });

    (dx, sum_g_xhat, sum_g)
}
