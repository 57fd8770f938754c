//! Shared helpers: central-difference gradient checking for tape ops.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use standseg_core::autodiff::{BnState, Mode, Params, Tape, Tensor4, Var};
use standseg_core::loss::{focal_tversky_loss, focal_tversky_loss_with_grad, LossParams};

pub struct ParamSpec {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn random_values(rng: &mut ChaCha8Rng, count: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn make_params(specs: &[ParamSpec]) -> Params<f64> {
    let mut params = Params::new();
    for s in specs {
        params
            .insert(s.name, s.shape.clone(), s.values.clone())
            .unwrap();
    }
    params
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Check the tape's gradients for `build` against central differences, both
/// for the input tensor and for every parameter. `build` must be a pure
/// function of (tape, input var, params).
pub fn check_gradients<F>(
    dims: (usize, usize, usize, usize),
    x_values: Vec<f64>,
    specs: Vec<ParamSpec>,
    rng: &mut ChaCha8Rng,
    tol: f64,
    what: &str,
    build: F,
) where
    F: Fn(&mut Tape<f64>, Var, &Params<f64>) -> Var,
{
    let mut tape = Tape::new();
    let x = tape.input(Tensor4::new(dims, x_values.clone()).unwrap());
    let mut params = make_params(&specs);
    let out = build(&mut tape, x, &params);
    let out_dims = tape.value(out).dims();
    let seed = random_values(rng, tape.value(out).numel(), -1.0, 1.0);
    tape.backward(out, Tensor4::new(out_dims, seed.clone()).unwrap(), &mut params)
        .unwrap();
    let dx = tape.grad(x).expect("input gradient recorded").to_vec();

    let objective = |x_vals: &[f64], specs: &[ParamSpec]| -> f64 {
        let mut tape = Tape::new();
        let x = tape.input(Tensor4::new(dims, x_vals.to_vec()).unwrap());
        let params = make_params(specs);
        let out = build(&mut tape, x, &params);
        tape.value(out)
            .data()
            .iter()
            .zip(&seed)
            .map(|(&o, &s)| o * s)
            .sum()
    };

    for i in 0..x_values.len() {
        let h = 1e-5 * x_values[i].abs().max(1.0);
        let mut plus = x_values.clone();
        plus[i] += h;
        let mut minus = x_values.clone();
        minus[i] -= h;
        let numeric = (objective(&plus, &specs) - objective(&minus, &specs)) / (2.0 * h);
        let err = relative_error(dx[i], numeric);
        assert!(
            err <= tol,
            "{what}: d/dx[{i}] analytic {} vs numeric {numeric} (rel err {err:.2e})",
            dx[i]
        );
    }
    for (si, spec) in specs.iter().enumerate() {
        let analytic = &params.get(spec.name).unwrap().grad;
        for j in 0..spec.values.len() {
            let h = 1e-5 * spec.values[j].abs().max(1.0);
            let perturbed = |delta: f64, specs: &[ParamSpec]| -> f64 {
                let mut copy: Vec<ParamSpec> = specs
                    .iter()
                    .map(|s| ParamSpec {
                        name: s.name,
                        shape: s.shape.clone(),
                        values: s.values.clone(),
                    })
                    .collect();
                copy[si].values[j] += delta;
                objective(&x_values, &copy)
            };
            let numeric = (perturbed(h, &specs) - perturbed(-h, &specs)) / (2.0 * h);
            let err = relative_error(analytic[j], numeric);
            assert!(
                err <= tol,
                "{what}: d/d{}[{j}] analytic {} vs numeric {numeric} (rel err {err:.2e})",
                spec.name,
                analytic[j]
            );
        }
    }
}

pub fn check_conv2d_once(rng: &mut ChaCha8Rng, tol: f64) {
    let (n, cin, cout) = (
        rng.random_range(1..=2usize),
        rng.random_range(1..=3usize),
        rng.random_range(1..=3usize),
    );
    let (h, w) = (rng.random_range(2..=5usize), rng.random_range(2..=5usize));
    let x = random_values(rng, n * cin * h * w, -1.0, 1.0);
    let specs = vec![
        ParamSpec {
            name: "w",
            shape: vec![cout, cin, 3, 3],
            values: random_values(rng, cout * cin * 9, -0.6, 0.6),
        },
        ParamSpec {
            name: "b",
            shape: vec![cout],
            values: random_values(rng, cout, -0.3, 0.3),
        },
    ];
    check_gradients((n, cin, h, w), x, specs, rng, tol, "conv2d", |tape, x, p| {
        tape.conv2d(x, p, "w", "b").unwrap()
    });
}

pub fn check_transposed_conv2d_once(rng: &mut ChaCha8Rng, tol: f64) {
    let (n, cin, cout) = (
        rng.random_range(1..=2usize),
        rng.random_range(1..=3usize),
        rng.random_range(1..=3usize),
    );
    let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
    let x = random_values(rng, n * cin * h * w, -1.0, 1.0);
    let specs = vec![ParamSpec {
        name: "w",
        shape: vec![cin, cout, 2, 2],
        values: random_values(rng, cin * cout * 4, -0.6, 0.6),
    }];
    check_gradients(
        (n, cin, h, w),
        x,
        specs,
        rng,
        tol,
        "transposed_conv2d",
        |tape, x, p| tape.transposed_conv2d(x, p, "w").unwrap(),
    );
}

pub fn check_maxpool2_once(rng: &mut ChaCha8Rng, tol: f64) {
    let (n, c) = (rng.random_range(1..=2usize), rng.random_range(1..=3usize));
    let (h, w) = (
        2 * rng.random_range(1..=3usize),
        2 * rng.random_range(1..=3usize),
    );
    let x = random_values(rng, n * c * h * w, -1.0, 1.0);
    check_gradients((n, c, h, w), x, vec![], rng, tol, "maxpool2", |tape, x, _| {
        tape.maxpool2(x).unwrap()
    });
}

pub fn check_batchnorm2d_once(rng: &mut ChaCha8Rng, tol: f64) {
    let (n, c) = (rng.random_range(2..=3usize), rng.random_range(1..=3usize));
    let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
    let x = random_values(rng, n * c * h * w, -1.0, 1.0);
    let specs = vec![
        ParamSpec {
            name: "scale",
            shape: vec![c],
            values: random_values(rng, c, 0.5, 1.5),
        },
        ParamSpec {
            name: "shift",
            shape: vec![c],
            values: random_values(rng, c, -0.5, 0.5),
        },
    ];
    check_gradients(
        (n, c, h, w),
        x,
        specs,
        rng,
        tol,
        "batchnorm2d",
        |tape, x, p| {
            let mut state = BnState::new(tape.value(x).dims().1);
            tape.batchnorm2d(x, p, "scale", "shift", &mut state, Mode::Train)
                .unwrap()
        },
    );
}

pub fn check_swish_once(rng: &mut ChaCha8Rng, tol: f64) {
    let (n, c) = (rng.random_range(1..=2usize), rng.random_range(1..=3usize));
    let (h, w) = (rng.random_range(2..=5usize), rng.random_range(2..=5usize));
    let x = random_values(rng, n * c * h * w, -2.0, 2.0);
    check_gradients((n, c, h, w), x, vec![], rng, tol, "swish", |tape, x, _| {
        tape.swish(x)
    });
}

pub fn check_softmax_once(rng: &mut ChaCha8Rng, tol: f64) {
    let (n, c) = (rng.random_range(1..=2usize), rng.random_range(2..=4usize));
    let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
    let x = random_values(rng, n * c * h * w, -2.0, 2.0);
    check_gradients(
        (n, c, h, w),
        x,
        vec![],
        rng,
        tol,
        "softmax_channels",
        |tape, x, _| tape.softmax_channels(x),
    );
}

/// FD-check the closed-form focal Tversky gradient for one random
/// probability/mask pair.
pub fn check_focal_loss_once(rng: &mut ChaCha8Rng, gamma: f64, tol: f64) {
    let (n, c) = (rng.random_range(1..=2usize), rng.random_range(2..=4usize));
    let (h, w) = (rng.random_range(2..=4usize), rng.random_range(2..=4usize));
    let params = LossParams::new(rng.random_range(0.3..0.7), gamma).unwrap();
    let probs = random_values(rng, n * c * h * w, 0.05, 0.95);
    let mut mask = vec![0.0f64; n * c * h * w];
    for nb in 0..n {
        for p in 0..h * w {
            let ch = rng.random_range(0..c);
            mask[(nb * c + ch) * h * w + p] = 1.0;
        }
    }
    let mask = Tensor4::new((n, c, h, w), mask).unwrap();
    let probs_t = Tensor4::new((n, c, h, w), probs.clone()).unwrap();
    let (_, grad) = focal_tversky_loss_with_grad(&probs_t, &mask, &params).unwrap();
    for i in 0..probs.len() {
        let h_step = 1e-5;
        let mut plus = probs.clone();
        plus[i] += h_step;
        let mut minus = probs.clone();
        minus[i] -= h_step;
        let lp = focal_tversky_loss(&Tensor4::new((n, c, h, w), plus).unwrap(), &mask, &params)
            .unwrap();
        let lm = focal_tversky_loss(&Tensor4::new((n, c, h, w), minus).unwrap(), &mask, &params)
            .unwrap();
        let numeric = (lp - lm) / (2.0 * h_step);
        let err = relative_error(grad.data()[i], numeric);
        assert!(
            err <= tol,
            "focal loss gamma {gamma}: d/dp[{i}] analytic {} vs numeric {numeric} (rel err {err:.2e})",
            grad.data()[i]
        );
    }
}
