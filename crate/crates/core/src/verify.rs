//! Self-checks run by `warmstart verify`: invariants of the network,
//! optimizer, reinitialization and harness on tiny instances.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{InitializerName, ModelConfig, Protocol, RunConfig};
use crate::data::{gen_synthetic, parse_csv, SyntheticSpec};
use crate::harness::{run_online, ExperimentRecord};
use crate::nn::{self, init_params, Activation, ModelParams, NetworkSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::output::curves_csv;
use crate::reinit::{scale_params, Initializer};
use crate::seeds;

pub type Check = (&'static str, Result<(), String>);

/// Largest relative error between analytic and central-difference
/// gradients over every parameter.
pub fn gradient_check(
    params: &ModelParams,
    inputs: &Array2<f64>,
    labels: &[usize],
    confidence_beta: f64,
    step: f64,
) -> crate::error::Result<f64> {
    let (_, grads) = nn::loss_and_gradients(params, inputs.view(), labels, confidence_beta)?;
    let analytic = grads.flatten();
    let loss_at = |p: &ModelParams| -> crate::error::Result<f64> {
        Ok(nn::loss_and_gradients(p, inputs.view(), labels, confidence_beta)?.0)
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    let mut k = 0;
    for l in 0..probe.layers.len() {
        let n_w = probe.layers[l].weights.len();
        let n_b = probe.layers[l].bias.as_ref().map_or(0, |b| b.len());
        for i in 0..n_w + n_b {
            let original = *param_mut(&mut probe, l, i);
            *param_mut(&mut probe, l, i) = original + step;
            let up = loss_at(&probe)?;
            *param_mut(&mut probe, l, i) = original - step;
            let down = loss_at(&probe)?;
            *param_mut(&mut probe, l, i) = original;
            let numeric = (up - down) / (2.0 * step);
            let err = (numeric - analytic[k]).abs() / numeric.abs().max(analytic[k].abs()).max(1e-8);
            worst = worst.max(err);
            k += 1;
        }
    }
    Ok(worst)
}

/// The `i`-th value of layer `l`, weights first (row-major) then bias.
fn param_mut(p: &mut ModelParams, l: usize, i: usize) -> &mut f64 {
    let layer = &mut p.layers[l];
    let n_w = layer.weights.len();
    if i < n_w {
        &mut layer.weights.as_slice_mut().expect("standard layout")[i]
    } else {
        &mut layer.bias.as_mut().expect("bias present")[i - n_w]
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = seeds::rng(seed, "verify/inputs", 0);
    Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
}

fn check_scaling() -> Result<(), String> {
    for depth in 2..=4 {
        let mut widths = vec![5];
        widths.extend(std::iter::repeat_n(7, depth - 1));
        widths.push(4);
        let spec = NetworkSpec::new(widths, Activation::Relu, false).map_err(|e| e.to_string())?;
        let params = init_params(&spec, depth as u64);
        let x = random_inputs(50, 5, depth as u64);
        let base = nn::logits(&params, x.view()).map_err(|e| e.to_string())?;
        for lambda in [0.1, 0.5, 2.0] {
            let scaled = scale_params(&params, lambda).map_err(|e| e.to_string())?;
            let out = nn::logits(&scaled, x.view()).map_err(|e| e.to_string())?;
            let factor = lambda.powi(depth as i32);
            for (a, b) in out.iter().zip(base.iter()) {
                let want = factor * b;
                ensure((a - want).abs() <= 1e-10 * want.abs().max(1e-300), || {
                    format!("depth {depth}, lambda {lambda}: {a} vs {want}")
                })?;
            }
            ensure(nn::argmax_rows(&out) == nn::argmax_rows(&base), || {
                format!("depth {depth}, lambda {lambda}: predictions changed")
            })?;
        }
    }
    Ok(())
}

fn check_gradients() -> Result<(), String> {
    for activation in [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::None] {
        for use_bias in [true, false] {
            let spec = NetworkSpec::new(vec![3, 5, 4, 3], activation, use_bias).map_err(|e| e.to_string())?;
            let params = init_params(&spec, 11);
            let x = random_inputs(6, 3, 12);
            let y = [0, 1, 2, 0, 1, 2];
            let err = gradient_check(&params, &x, &y, 0.1, 1e-6).map_err(|e| e.to_string())?;
            ensure(err < 1e-4, || format!("{activation:?} bias={use_bias}: relative error {err}"))?;
        }
    }
    Ok(())
}

fn check_adam() -> Result<(), String> {
    let spec = NetworkSpec::new(vec![1, 1], Activation::None, false).map_err(|e| e.to_string())?;
    let mut params = ModelParams::zeros(&spec);
    let mut grads = nn::Gradients::zeros_like(&params);
    grads.layers[0].weights[[0, 0]] = 0.5;
    let mut state = AdamState::new(&params);
    let cfg = AdamConfig::default();
    adam_step(&mut params, &grads, &mut state, &cfg).map_err(|e| e.to_string())?;
    // Bias correction makes the first step lr * g / (|g| + eps).
    let want = -0.001 * 0.5 / (0.5 + 1e-8);
    let got = params.layers[0].weights[[0, 0]];
    ensure((got - want).abs() < 1e-15, || format!("first Adam step {got}, expected {want}"))
}

fn check_endpoints() -> Result<(), String> {
    let spec = NetworkSpec::mlp(4, &[6], 3, Activation::Relu, true);
    let trained = scale_params(&init_params(&spec, 1), 1.7).map_err(|e| e.to_string())?;
    let warm = Initializer::shrink_perturb(1.0, 0.0).apply(&trained, 9).map_err(|e| e.to_string())?;
    ensure(warm == trained, || "shrink_perturb(1, 0) changed the parameters".into())?;
    let fresh = Initializer::shrink_perturb(0.0, 1.0).apply(&trained, 9).map_err(|e| e.to_string())?;
    ensure(fresh == init_params(&spec, 9), || {
        "shrink_perturb(0, 1) differs from a fresh initialization".into()
    })
}

fn check_csv_round_trip() -> Result<(), String> {
    let data = gen_synthetic(&SyntheticSpec::gaussian_mixture(40, 3, 4, 0.1, 2)).map_err(|e| e.to_string())?;
    let back = parse_csv(&data.to_csv_string(), false, "round-trip").map_err(|e| e.to_string())?;
    ensure(back.features == data.features && back.labels == data.labels, || {
        "CSV round trip lost information".into()
    })
}

fn tiny_online() -> RunConfig {
    let mut cfg = RunConfig::new(Protocol::Online);
    cfg.dataset = crate::config::DatasetSource::Synthetic(SyntheticSpec::gaussian_mixture(150, 4, 3, 0.1, 0));
    cfg.model = ModelConfig {
        hidden: vec![6],
        ..ModelConfig::default()
    };
    cfg.optimizer.set_batch_size(16);
    cfg.optimizer.set_learning_rate(0.01);
    cfg.convergence.max_epochs = 10;
    cfg.convergence.patience = 2;
    cfg.online.k_stream = 30;
    cfg.online.rounds = Some(3);
    cfg.initializers = vec![InitializerName::Warm, InitializerName::Random, InitializerName::ShrinkPerturb];
    cfg
}

fn online_records(cfg: &RunConfig) -> Result<Vec<ExperimentRecord>, String> {
    let crate::config::DatasetSource::Synthetic(spec) = &cfg.dataset else {
        unreachable!("tiny config is synthetic")
    };
    let data = gen_synthetic(spec).map_err(|e| e.to_string())?;
    run_online(cfg, &data, 3).map_err(|e| e.to_string())
}

fn check_determinism() -> Result<(), String> {
    let cfg = tiny_online();
    let a = curves_csv(&online_records(&cfg)?, &cfg.hash()).map_err(|e| e.to_string())?;
    let b = curves_csv(&online_records(&cfg)?, &cfg.hash()).map_err(|e| e.to_string())?;
    ensure(a == b, || "repeated run produced different curves".into())
}

fn check_protocol_endpoints() -> Result<(), String> {
    let mut cfg = tiny_online();
    cfg.reinit.lambda = 0.0;
    cfg.reinit.noise_scale = 1.0;
    let records = online_records(&cfg)?;
    let strip = |r: &ExperimentRecord| -> Vec<(u64, f64, f64)> {
        r.rounds.iter().map(|x| (x.steps, x.val_accuracy, x.train_loss)).collect()
    };
    ensure(strip(&records[1]) == strip(&records[2]), || {
        "shrink_perturb(0, 1) run differs from random restart".into()
    })?;
    cfg.reinit.lambda = 1.0;
    cfg.reinit.noise_scale = 0.0;
    let records = online_records(&cfg)?;
    ensure(strip(&records[0]) == strip(&records[2]), || {
        "shrink_perturb(1, 0) run differs from warm start".into()
    })
}

/// Run every check; the caller decides how to report.
pub fn run_checks() -> Vec<Check> {
    vec![
        ("relu scaling preserves predictions", check_scaling()),
        ("analytic gradients match finite differences", check_gradients()),
        ("adam first step", check_adam()),
        ("shrink-perturb endpoints", check_endpoints()),
        ("csv round trip", check_csv_round_trip()),
        ("online run is deterministic", check_determinism()),
        ("online endpoints match warm and random", check_protocol_endpoints()),
    ]
}
