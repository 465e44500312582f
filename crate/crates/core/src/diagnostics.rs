//! Analysis instruments: gradient-norm split between old and new data,
//! weight correlation with initialization, accuracy and entropy evaluation,
//! and long-format learning curves.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::ExperimentRecord;
use crate::nn::{self, Gradients, ModelParams};
use crate::reinit::scale_params;
use crate::stats;

/// Rows per forward pass when evaluating large index sets.
const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradSplit {
    pub mean_grad_norm_old: f64,
    pub mean_grad_norm_new: f64,
    /// `new / old`; `None` when the old norm is zero.
    pub ratio: Option<f64>,
}

/// Gradient of the mean loss over `indices`, accumulated in chunks.
pub fn mean_gradient(
    params: &ModelParams,
    dataset: &Dataset,
    indices: &[usize],
    confidence_beta: f64,
) -> Result<Gradients> {
    if indices.is_empty() {
        return Err(Error::input("cannot take a gradient over an empty index set"));
    }
    let mut total = Gradients::zeros_like(params);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.gather(chunk);
        let (_, g) = nn::loss_and_gradients(params, x.view(), &y, confidence_beta)?;
        total.add_scaled(&g, chunk.len() as f64 / indices.len() as f64)?;
    }
    Ok(total)
}

/// L2 norms of the full-parameter gradient of the mean loss on previously
/// seen (`old_idx`) and newly arrived (`new_idx`) samples.
pub fn grad_norm_split(
    params: &ModelParams,
    old_idx: &[usize],
    new_idx: &[usize],
    dataset: &Dataset,
) -> Result<GradSplit> {
    if old_idx.is_empty() || new_idx.is_empty() {
        return Err(Error::input("gradient split needs nonempty old and new subsets"));
    }
    let old = mean_gradient(params, dataset, old_idx, 0.0)?.l2_norm();
    let new = mean_gradient(params, dataset, new_idx, 0.0)?.l2_norm();
    Ok(GradSplit {
        mean_grad_norm_old: old,
        mean_grad_norm_new: new,
        ratio: (old > 0.0).then(|| new / old),
    })
}

/// Pearson correlation between the flattened weight matrices of two
/// congruent models. Biases are excluded.
pub fn weight_correlation(a: &ModelParams, b: &ModelParams) -> Result<f64> {
    a.check_congruent(&b.layers, "weight correlation")?;
    let wa = a.flatten_weights();
    let wb = b.flatten_weights();
    if wa.len() < 2 {
        return Err(Error::input("correlation needs at least two weights"));
    }
    stats::pearson(&wa, &wb)
        .ok_or_else(|| Error::input("correlation undefined: a weight vector has zero variance"))
}

/// Accuracy and mean (unpenalized) cross-entropy over `indices`.
pub fn evaluate(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<(f64, f64)> {
    if indices.is_empty() {
        return Err(Error::input("cannot evaluate on an empty index set"));
    }
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.gather(chunk);
        let logits = nn::logits(params, x.view())?;
        let (loss, _) = nn::softmax_xent(&logits, &y, 0.0)?;
        loss_sum += loss * chunk.len() as f64;
        correct += nn::argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    let n = indices.len() as f64;
    Ok((correct as f64 / n, loss_sum / n))
}

pub fn accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    Ok(evaluate(params, dataset, &all)?.0)
}

pub fn mean_output_entropy(params: &ModelParams, inputs: &Array2<f64>) -> Result<f64> {
    Ok(nn::output_entropy(&nn::logits(params, inputs.view())?))
}

/// Accuracy after scaling every parameter by each `lambda`.
pub fn shrink_resilience(
    params: &ModelParams,
    dataset: &Dataset,
    lambdas: &[f64],
) -> Result<Vec<(f64, f64)>> {
    lambdas
        .iter()
        .map(|&l| Ok((l, accuracy(&scale_params(params, l)?, dataset)?)))
        .collect()
}

/// Seed column of a curve row: a replicate, or an aggregate over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedTag {
    Seed(u64),
    Mean,
    Std,
}

impl std::fmt::Display for SeedTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SeedTag::Seed(s) => write!(f, "{s}"),
            SeedTag::Mean => write!(f, "mean"),
            SeedTag::Std => write!(f, "std"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub protocol: String,
    pub series: String,
    pub seed: SeedTag,
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

/// Metrics emitted per round, in output order.
pub const CURVE_METRICS: [&str; 7] = [
    "val_accuracy",
    "train_accuracy",
    "val_loss",
    "train_loss",
    "epochs_used",
    "steps",
    "cumulative_steps",
];

fn metric_values(round: &crate::harness::RoundResult) -> [f64; 7] {
    [
        round.val_accuracy,
        round.train_accuracy,
        round.val_loss,
        round.train_loss,
        round.epochs_used as f64,
        round.steps as f64,
        round.cumulative_steps as f64,
    ]
}

/// Long-format curves: one row per (record, round, metric), then mean and
/// std rows per (series, phase, x, metric) wherever more than one seed
/// contributed.
pub fn assemble_curves(records: &[ExperimentRecord]) -> Result<Vec<CurvePoint>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    if let Some(other) = records.iter().find(|r| r.protocol != first.protocol) {
        return Err(Error::input(format!(
            "cannot mix protocols '{}' and '{}' in one curve set",
            first.protocol, other.protocol
        )));
    }

    let mut points = Vec::new();
    // (series, x bits, metric index) -> values across seeds, x
    let mut groups: BTreeMap<(String, u64, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for record in records {
        for round in &record.rounds {
            let series = record.series_for(round);
            for (m, value) in metric_values(round).into_iter().enumerate() {
                points.push(CurvePoint {
                    protocol: record.protocol.clone(),
                    series: series.clone(),
                    seed: SeedTag::Seed(record.seed),
                    x: round.x,
                    metric: CURVE_METRICS[m].to_string(),
                    value,
                });
                groups
                    .entry((series.clone(), round.x.to_bits(), m))
                    .or_insert_with(|| (round.x, Vec::new()))
                    .1
                    .push(value);
            }
        }
    }
    for ((series, _, m), (x, values)) in groups {
        if values.len() < 2 {
            continue;
        }
        for (tag, value) in [(SeedTag::Mean, stats::mean(&values)), (SeedTag::Std, stats::std_dev(&values))] {
            points.push(CurvePoint {
                protocol: first.protocol.clone(),
                series: series.clone(),
                seed: tag,
                x,
                metric: CURVE_METRICS[m].to_string(),
                value,
            });
        }
    }
    Ok(points)
}
