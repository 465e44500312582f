//! Parameter transformations applied when new training data arrives.
//!
//! The central one is shrink-and-perturb, `theta <- lambda * theta + gamma * theta_fresh`,
//! where `theta_fresh` is a new draw from [`init_params`]. Drawing the noise as a
//! scaled fresh network keeps it proportional to each layer's init variance.
//! Warm starting (`lambda = 1, gamma = 0`) and random restarts (`lambda = 0,
//! gamma = 1`) are exact special cases.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_params, LayerParams, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinitScope {
    #[default]
    AllLayers,
    LastLayerOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShrinkPerturbConfig {
    pub lambda: f64,
    pub noise_scale: f64,
    pub scope: ReinitScope,
}

impl Default for ShrinkPerturbConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            noise_scale: 0.01,
            scope: ReinitScope::AllLayers,
        }
    }
}

impl ShrinkPerturbConfig {
    pub fn new(lambda: f64, noise_scale: f64) -> Self {
        Self {
            lambda,
            noise_scale,
            scope: ReinitScope::AllLayers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::input(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::input(format!(
                "noise scale must be nonnegative, got {}",
                self.noise_scale
            )));
        }
        Ok(())
    }
}

fn blend(layer: &mut LayerParams, fresh: &LayerParams, lambda: f64, gamma: f64) {
    // Skipping the no-op halves keeps the warm and random endpoints bit-exact.
    if lambda != 1.0 {
        layer.weights.mapv_inplace(|v| lambda * v);
        if let Some(b) = layer.bias.as_mut() {
            b.mapv_inplace(|v| lambda * v);
        }
    }
    if gamma != 0.0 {
        layer.weights.scaled_add(gamma, &fresh.weights);
        if let (Some(b), Some(fb)) = (layer.bias.as_mut(), fresh.bias.as_ref()) {
            b.scaled_add(gamma, fb);
        }
    }
}

pub fn shrink_perturb(
    params: &ModelParams,
    cfg: &ShrinkPerturbConfig,
    seed: u64,
) -> Result<ModelParams> {
    cfg.validate()?;
    let fresh = init_params(&params.spec, seed);
    params.check_congruent(&fresh.layers, "shrink-perturb")?;
    let mut out = params.clone();
    let first = match cfg.scope {
        ReinitScope::AllLayers => 0,
        ReinitScope::LastLayerOnly => out.depth() - 1,
    };
    for (layer, fresh) in out.layers.iter_mut().zip(&fresh.layers).skip(first) {
        blend(layer, fresh, cfg.lambda, cfg.noise_scale);
    }
    Ok(out)
}

/// Multiply every learnable value by `lambda`.
pub fn scale_params(params: &ModelParams, lambda: f64) -> Result<ModelParams> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::input(format!("scale must be positive, got {lambda}")));
    }
    let mut out = params.clone();
    for layer in &mut out.layers {
        layer.weights.mapv_inplace(|v| lambda * v);
        if let Some(b) = layer.bias.as_mut() {
            b.mapv_inplace(|v| lambda * v);
        }
    }
    Ok(out)
}

/// Perturbation without shrinking.
pub fn noise_only(params: &ModelParams, noise_scale: f64, seed: u64) -> Result<ModelParams> {
    shrink_perturb(params, &ShrinkPerturbConfig::new(1.0, noise_scale), seed)
}

/// How a model is initialized at a round boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initializer {
    Warm,
    Random,
    ShrinkPerturb { lambda: f64, noise_scale: f64 },
    NoiseOnly { noise_scale: f64 },
    LastLayer { lambda: f64, noise_scale: f64 },
}

impl Initializer {
    pub fn shrink_perturb(lambda: f64, noise_scale: f64) -> Self {
        Initializer::ShrinkPerturb {
            lambda,
            noise_scale,
        }
    }

    /// The equivalent shrink-perturb setting.
    pub fn as_shrink_perturb(&self) -> ShrinkPerturbConfig {
        match *self {
            Initializer::Warm => ShrinkPerturbConfig::new(1.0, 0.0),
            Initializer::Random => ShrinkPerturbConfig::new(0.0, 1.0),
            Initializer::ShrinkPerturb {
                lambda,
                noise_scale,
            } => ShrinkPerturbConfig::new(lambda, noise_scale),
            Initializer::NoiseOnly { noise_scale } => ShrinkPerturbConfig::new(1.0, noise_scale),
            Initializer::LastLayer {
                lambda,
                noise_scale,
            } => ShrinkPerturbConfig {
                lambda,
                noise_scale,
                scope: ReinitScope::LastLayerOnly,
            },
        }
    }

    /// True when the result does not depend on the previous parameters.
    pub fn ignores_previous(&self) -> bool {
        let sp = self.as_shrink_perturb();
        sp.lambda == 0.0 && sp.scope == ReinitScope::AllLayers
    }

    pub fn validate(&self) -> Result<()> {
        self.as_shrink_perturb().validate()
    }

    /// Initialize from `previous`; `seed` drives the fresh draw.
    pub fn apply(&self, previous: &ModelParams, seed: u64) -> Result<ModelParams> {
        match self {
            Initializer::Warm => Ok(previous.clone()),
            Initializer::Random => Ok(init_params(&previous.spec, seed)),
            other => shrink_perturb(previous, &other.as_shrink_perturb(), seed),
        }
    }
}

impl fmt::Display for Initializer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Initializer::Warm => write!(f, "warm"),
            Initializer::Random => write!(f, "random"),
            Initializer::ShrinkPerturb {
                lambda,
                noise_scale,
            } => write!(f, "shrink_perturb(lambda={lambda},noise={noise_scale})"),
            Initializer::NoiseOnly { noise_scale } => write!(f, "noise_only(noise={noise_scale})"),
            Initializer::LastLayer {
                lambda,
                noise_scale,
            } => write!(f, "last_layer(lambda={lambda},noise={noise_scale})"),
        }
    }
}
