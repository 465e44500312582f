//! Mini-batch optimizers. Weight decay is an L2 term added to the weight
//! gradient; biases are never decayed.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Gradients, LayerParams, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 0.0,
            batch_size: 128,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.weight_decay, self.batch_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            batch_size: 128,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        check_common(self.learning_rate, self.weight_decay, self.batch_size)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::input(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::input(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_common(lr: f64, wd: f64, batch_size: usize) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::input(format!("learning rate must be positive, got {lr}")));
    }
    if !(wd >= 0.0 && wd.is_finite()) {
        return Err(Error::input(format!("weight decay must be nonnegative, got {wd}")));
    }
    if batch_size == 0 {
        return Err(Error::input("batch size must be at least 1"));
    }
    Ok(())
}

/// `theta <- theta - lr * (g + wd * theta)` on weights, `theta - lr * g` on biases.
pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, cfg: &SgdConfig) -> Result<()> {
    params.check_congruent(&grads.layers, "sgd step")?;
    let (lr, wd) = (cfg.learning_rate, cfg.weight_decay);
    for (layer, g) in params.layers.iter_mut().zip(&grads.layers) {
        Zip::from(&mut layer.weights)
            .and(&g.weights)
            .for_each(|w, &gw| *w -= lr * (gw + wd * *w));
        if let (Some(b), Some(gb)) = (layer.bias.as_mut(), g.bias.as_ref()) {
            b.scaled_add(-lr, gb);
        }
    }
    Ok(())
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<LayerParams>,
    pub second_moment: Vec<LayerParams>,
    pub step: u64,
    resets: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = Gradients::zeros_like(params).layers;
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            resets: 0,
        }
    }

    /// Zero both moments and the step counter.
    pub fn reset(&mut self) {
        for layer in self.first_moment.iter_mut().chain(self.second_moment.iter_mut()) {
            layer.weights.fill(0.0);
            if let Some(b) = layer.bias.as_mut() {
                b.fill(0.0);
            }
        }
        self.step = 0;
        self.resets += 1;
    }

    /// How many times [`AdamState::reset`] has been called.
    pub fn reset_count(&self) -> u64 {
        self.resets
    }
}

/// Returns a freshly zeroed copy of `state`.
pub fn reset_state(state: &AdamState) -> AdamState {
    let mut out = state.clone();
    out.reset();
    out
}

/// Bias-corrected Adam with L2 weight decay folded into the weight gradient.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_congruent(&grads.layers, "adam step")?;
    params.check_congruent(&state.first_moment, "adam first moment")?;
    params.check_congruent(&state.second_moment, "adam second moment")?;

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps, lr, wd) = (
        cfg.beta1,
        cfg.beta2,
        cfg.epsilon,
        cfg.learning_rate,
        cfg.weight_decay,
    );
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let update = move |theta: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *theta -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (((layer, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(|theta, &gw, m, v| {
                let g = gw + wd * *theta;
                update(theta, m, v, g);
            });
        if let (Some(b), Some(gb), Some(mb), Some(vb)) =
            (layer.bias.as_mut(), g.bias.as_ref(), m.bias.as_mut(), v.bias.as_mut())
        {
            Zip::from(b)
                .and(gb)
                .and(mb)
                .and(vb)
                .for_each(|theta, &g, m, v| update(theta, m, v, g));
        }
    }
    Ok(())
}

/// Either optimizer, as selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adam(AdamConfig),
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam(AdamConfig::default())
    }
}

impl OptimizerConfig {
    pub fn batch_size(&self) -> usize {
        match self {
            OptimizerConfig::Sgd(c) => c.batch_size,
            OptimizerConfig::Adam(c) => c.batch_size,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.learning_rate,
            OptimizerConfig::Adam(c) => c.learning_rate,
        }
    }

    pub fn set_batch_size(&mut self, batch_size: usize) {
        match self {
            OptimizerConfig::Sgd(c) => c.batch_size = batch_size,
            OptimizerConfig::Adam(c) => c.batch_size = batch_size,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            OptimizerConfig::Sgd(c) => c.learning_rate = lr,
            OptimizerConfig::Adam(c) => c.learning_rate = lr,
        }
    }

    pub fn set_weight_decay(&mut self, wd: f64) {
        match self {
            OptimizerConfig::Sgd(c) => c.weight_decay = wd,
            OptimizerConfig::Adam(c) => c.weight_decay = wd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd(c) => c.validate(),
            OptimizerConfig::Adam(c) => c.validate(),
        }
    }
}

/// Per-model optimizer state; SGD carries only the reset counter.
#[derive(Debug, Clone)]
pub enum OptimizerState {
    Sgd { resets: u64 },
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(cfg: &OptimizerConfig, params: &ModelParams) -> Self {
        match cfg {
            OptimizerConfig::Sgd(_) => OptimizerState::Sgd { resets: 0 },
            OptimizerConfig::Adam(_) => OptimizerState::Adam(AdamState::new(params)),
        }
    }

    pub fn reset(&mut self) {
        match self {
            OptimizerState::Sgd { resets } => *resets += 1,
            OptimizerState::Adam(s) => s.reset(),
        }
    }

    pub fn reset_count(&self) -> u64 {
        match self {
            OptimizerState::Sgd { resets } => *resets,
            OptimizerState::Adam(s) => s.reset_count(),
        }
    }

    pub fn step(
        &mut self,
        cfg: &OptimizerConfig,
        params: &mut ModelParams,
        grads: &Gradients,
    ) -> Result<()> {
        match (cfg, self) {
            (OptimizerConfig::Sgd(c), OptimizerState::Sgd { .. }) => sgd_step(params, grads, c),
            (OptimizerConfig::Adam(c), OptimizerState::Adam(s)) => adam_step(params, grads, s, c),
            _ => Err(Error::contract("optimizer state does not match its config")),
        }
    }
}
