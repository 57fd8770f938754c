//! Named trainable parameters, He initialization, and the Adam update.

use crate::autodiff::tensor::Scalar;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;

/// One trainable tensor plus its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || values.len() != numel {
            return Err(Error::Shape(format!(
                "{} values for parameter shape {shape:?}",
                values.len()
            )));
        }
        let n = values.len();
        Ok(Self {
            shape,
            values,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Parameter registry keyed by name; iteration order is lexicographic so
/// every pass over the set is deterministic.
#[derive(Debug, Clone, Default)]
pub struct Params<T> {
    map: BTreeMap<String, Parameter<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<T>) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.map.insert(name.to_string(), Parameter::new(shape, values)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|p| p.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    /// Accumulate a gradient into the named parameter.
    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.len() != grad.len() {
            return Err(Error::Shape(format!(
                "gradient length {} for parameter {name:?} of {} values",
                grad.len(),
                p.grad.len()
            )));
        }
        for (a, &g) in p.grad.iter_mut().zip(grad) {
            *a += g;
        }
        Ok(())
    }

    /// Convert every parameter to another scalar type, resetting optimizer
    /// state.
    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::new();
        for (name, p) in &self.map {
            let values = p.values.iter().map(|&v| U::from_f64(v.to_f64())).collect();
            out.insert(name, p.shape.clone(), values).expect("shapes already valid");
        }
        out
    }
}

/// Draw `count` weights from the He normal distribution N(0, 2/fan_in).
pub fn he_init<T: Scalar, R: Rng>(count: usize, fan_in: usize, rng: &mut R) -> Result<Vec<T>> {
    if fan_in == 0 {
        return Err(Error::Config("he_init fan_in must be positive".into()));
    }
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
        .expect("std is finite and positive");
    Ok((0..count).map(|_| T::from_f64(normal.sample(rng))).collect())
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam update over every parameter (decay 0.9/0.999, epsilon 1e-8,
/// bias correction). Gradients are zeroed afterwards. `step` counts from 1.
pub fn adam_step<T: Scalar>(params: &mut Params<T>, learning_rate: f64, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("Adam step counter starts at 1".into()));
    }
    let b1 = T::from_f64(ADAM_BETA1);
    let b2 = T::from_f64(ADAM_BETA2);
    let one = T::one();
    let lr = T::from_f64(learning_rate);
    let eps = T::from_f64(ADAM_EPS);
    let bias1 = T::from_f64(1.0 - ADAM_BETA1.powi(step as i32));
    let bias2 = T::from_f64(1.0 - ADAM_BETA2.powi(step as i32));
    for (name, p) in params.map.iter_mut() {
        for i in 0..p.values.len() {
            let g = p.grad[i];
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient {:?} in parameter {name:?} at index {i} (step {step})",
                    g
                )));
            }
            p.m[i] = b1 * p.m[i] + (one - b1) * g;
            p.v[i] = b2 * p.v[i] + (one - b2) * g * g;
            let m_hat = p.m[i] / bias1;
            let v_hat = p.v[i] / bias2;
            p.values[i] = p.values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        p.grad.fill(T::zero());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = Params::<f64>::new();
        params.insert("w", vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        adam_step(&mut params, 0.1, 1).unwrap();
        assert_eq!(params.get("w").unwrap().values, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // hand-executed recurrence: m=0.1, v=0.001, m_hat=1, v_hat=1,
        // update = -lr * 1/(1+1e-8)
        let mut params = Params::<f64>::new();
        params.insert("w", vec![1], vec![0.0]).unwrap();
        params.get_mut("w").unwrap().grad[0] = 1.0;
        adam_step(&mut params, 0.1, 1).unwrap();
        let w = params.get("w").unwrap().values[0];
        assert!((w + 0.1).abs() < 1e-8, "got {w}");
        // gradients zeroed after the step
        assert_eq!(params.get("w").unwrap().grad[0], 0.0);
    }

    #[test]
    fn adam_descends_a_quadratic_bowl() {
        let mut params = Params::<f64>::new();
        params.insert("x", vec![1], vec![1.0]).unwrap();
        for step in 1..=500 {
            let x = params.get("x").unwrap().values[0];
            params.get_mut("x").unwrap().grad[0] = 2.0 * x;
            adam_step(&mut params, 0.05, step).unwrap();
        }
        let x = params.get("x").unwrap().values[0];
        assert!(x.abs() < 1e-3, "converged to {x}");
    }

    #[test]
    fn non_finite_gradient_aborts_with_parameter_name() {
        let mut params = Params::<f32>::new();
        params.insert("enc0.conv1.w", vec![2], vec![0.0, 0.0]).unwrap();
        params.get_mut("enc0.conv1.w").unwrap().grad[1] = f32::NAN;
        match adam_step(&mut params, 0.01, 1) {
            Err(Error::Training(msg)) => assert!(msg.contains("enc0.conv1.w"), "{msg}"),
            other => panic!("expected training error, got {other:?}"),
        }
    }

    #[test]
    fn he_init_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let fan_in = 9 * 16;
        let samples: Vec<f64> = he_init(100_000, fan_in, &mut rng).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / samples.len() as f64;
        let expected_std = (2.0 / fan_in as f64).sqrt();
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!(
            (var.sqrt() - expected_std).abs() < 0.02 * expected_std,
            "std {} expected {expected_std}",
            var.sqrt()
        );
    }

    #[test]
    fn he_init_is_deterministic_per_seed() {
        let a: Vec<f32> = he_init(64, 45, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b: Vec<f32> = he_init(64, 45, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut params = Params::<f32>::new();
        params.insert("w", vec![1], vec![0.0]).unwrap();
        assert!(matches!(
            params.insert("w", vec![1], vec![0.0]),
            Err(Error::Config(_))
        ));
    }
}
