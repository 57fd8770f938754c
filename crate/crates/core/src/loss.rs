//! The focal Tversky training loss over soft per-class counts, with an
//! analytic gradient w.r.t. the predicted probabilities.

use crate::autodiff::{Scalar, Tensor4};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Smoothing constant added to the Tversky numerator and denominator; keeps
/// absent classes and perfect predictions differentiable.
pub const TVERSKY_SMOOTH: f64 = 1e-6;

/// Loss hyperparameters: alpha weights false positives, beta = 1 - alpha
/// weights false negatives, gamma is the focal exponent parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossParamsRaw")]
pub struct LossParams {
    alpha: f64,
    gamma: f64,
}

#[derive(Deserialize)]
struct LossParamsRaw {
    alpha: f64,
    gamma: f64,
}

impl TryFrom<LossParamsRaw> for LossParams {
    type Error = Error;

    fn try_from(raw: LossParamsRaw) -> Result<Self> {
        LossParams::new(raw.alpha, raw.gamma)
    }
}

impl LossParams {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        if !(0.3..=0.7).contains(&alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0.3, 0.7], got {alpha}"
            )));
        }
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be at least 1, got {gamma}")));
        }
        Ok(Self { alpha, gamma })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Exactly 1 - alpha.
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self { alpha: 0.5, gamma: 1.0 }
    }
}

/// Soft counts for one class, accumulated over every pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassCounts {
    pub tp: f64,
    pub fp: f64,
    pub fn_: f64,
}

fn check_pair<T: Scalar>(probabilities: &Tensor4<T>, mask: &Tensor4<T>) -> Result<()> {
    if probabilities.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "probabilities {:?} and mask {:?} disagree",
            probabilities.dims(),
            mask.dims()
        )));
    }
    let (n, c, h, w) = mask.dims();
    let plane = h * w;
    for nb in 0..n {
        for p in 0..plane {
            let mut sum = 0.0f64;
            for ch in 0..c {
                let v = mask.data()[(nb * c + ch) * plane + p].to_f64();
                if v != 0.0 && v != 1.0 {
                    return Err(Error::Input(format!(
                        "mask value {v} at (sample {nb}, channel {ch}, pixel {p}) is not 0/1"
                    )));
                }
                sum += v;
            }
            if sum != 1.0 {
                return Err(Error::Input(format!(
                    "mask is not one-hot at (sample {nb}, pixel {p}): channel sum {sum}"
                )));
            }
        }
    }
    Ok(())
}

/// Per-class soft counts: TP = sum(p*m), FP = sum(p*(1-m)), FN = sum((1-p)*m)
/// over all pixels of the batch. Accumulation runs in f64 in a fixed order.
pub fn soft_class_counts<T: Scalar>(
    probabilities: &Tensor4<T>,
    mask: &Tensor4<T>,
) -> Result<Vec<ClassCounts>> {
    check_pair(probabilities, mask)?;
    let (n, c, h, w) = probabilities.dims();
    let plane = h * w;
    let mut counts = vec![ClassCounts { tp: 0.0, fp: 0.0, fn_: 0.0 }; c];
    for nb in 0..n {
        for ch in 0..c {
            let base = (nb * c + ch) * plane;
            let slot = &mut counts[ch];
            for p in 0..plane {
                let prob = probabilities.data()[base + p].to_f64();
                let m = mask.data()[base + p].to_f64();
                slot.tp += prob * m;
                slot.fp += prob * (1.0 - m);
                slot.fn_ += (1.0 - prob) * m;
            }
        }
    }
    Ok(counts)
}

/// The raw Tversky index TP / (TP + alpha*FP + beta*FN). A zero denominator
/// (class absent and never predicted) reports 1: nothing was missed.
pub fn tversky_index(tp: f64, fp: f64, fn_: f64, params: &LossParams) -> f64 {
    let denom = tp + params.alpha() * fp + params.beta() * fn_;
    if denom == 0.0 {
        return 1.0;
    }
    tp / denom
}

/// One class's contribution to the focal loss: (1 - TI)^(1/gamma).
pub fn focal_component(ti: f64, gamma: f64) -> f64 {
    (1.0 - ti).max(0.0).powf(1.0 / gamma)
}

fn smoothed_components<T: Scalar>(
    probabilities: &Tensor4<T>,
    mask: &Tensor4<T>,
    params: &LossParams,
) -> Result<(Vec<ClassCounts>, Vec<f64>, f64)> {
    let counts = soft_class_counts(probabilities, mask)?;
    let tis: Vec<f64> = counts
        .iter()
        .map(|c| {
            (c.tp + TVERSKY_SMOOTH)
                / (c.tp + params.alpha() * c.fp + params.beta() * c.fn_ + TVERSKY_SMOOTH)
        })
        .collect();
    let loss = tis.iter().map(|&ti| focal_component(ti, params.gamma())).sum::<f64>()
        / tis.len() as f64;
    Ok((counts, tis, loss))
}

/// Focal Tversky loss: mean over classes of (1 - TI_i)^(1/gamma), each TI
/// smoothed by [`TVERSKY_SMOOTH`] in numerator and denominator.
pub fn focal_tversky_loss<T: Scalar>(
    probabilities: &Tensor4<T>,
    mask: &Tensor4<T>,
    params: &LossParams,
) -> Result<f64> {
    Ok(smoothed_components(probabilities, mask, params)?.2)
}

/// Loss value plus dLoss/dprobabilities, for seeding the tape's backward
/// pass.
pub fn focal_tversky_loss_with_grad<T: Scalar>(
    probabilities: &Tensor4<T>,
    mask: &Tensor4<T>,
    params: &LossParams,
) -> Result<(f64, Tensor4<T>)> {
    let (counts, tis, loss) = smoothed_components(probabilities, mask, params)?;
    let (n, c, h, w) = probabilities.dims();
    let plane = h * w;
    let n_classes = c as f64;
    let (alpha, beta, gamma) = (params.alpha(), params.beta(), params.gamma());

    // per class: dL/dTI and the pieces of dTI/dp shared by every pixel
    let mut dl_dti = vec![0.0f64; c];
    let mut denom = vec![0.0f64; c];
    for ch in 0..c {
        let one_minus = (1.0 - tis[ch]).max(0.0);
        // d/dTI of (1-TI)^(1/gamma) = -(1/gamma)(1-TI)^(1/gamma - 1)
        dl_dti[ch] = -(1.0 / gamma) * one_minus.powf(1.0 / gamma - 1.0) / n_classes;
        denom[ch] =
            counts[ch].tp + alpha * counts[ch].fp + beta * counts[ch].fn_ + TVERSKY_SMOOTH;
    }

    let mut grad = vec![T::zero(); probabilities.numel()];
    for nb in 0..n {
        for ch in 0..c {
            let base = (nb * c + ch) * plane;
            let numer = counts[ch].tp + TVERSKY_SMOOTH;
            let d = denom[ch];
            for p in 0..plane {
                let m = mask.data()[base + p].to_f64();
                // dTP/dp = m, dFP/dp = 1-m, dFN/dp = -m
                let d_denom = m + alpha * (1.0 - m) - beta * m;
                let dti_dp = (m * d - numer * d_denom) / (d * d);
                grad[base + p] = T::from_f64(dl_dti[ch] * dti_dp);
            }
        }
    }
    Ok((loss, Tensor4::new(probabilities.dims(), grad)?))
}
