//! Experimental protocols: two-phase warm starting, online learning,
//! grid sweeps, checkpoint-timing, pre-training crossover and iterated
//! shrink-perturb. Each protocol is a pure function of its configuration,
//! datasets and seed.
//!
//! Every random draw comes from a stream derived from the run seed, so
//! all initializers in one run see the same split, the same initial
//! model, the same mini-batch orders and the same fresh-init draws. That
//! pairing is what makes warm start and random restart exact special
//! cases of shrink-perturb in every protocol.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{GridAxis, Protocol, RunConfig};
use crate::data::{self, Dataset};
use crate::diagnostics::{self, GradSplit};
use crate::error::Error;
use crate::nn::{self, init_params, ModelParams, NetworkSpec};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::reinit::Initializer;
use crate::seeds;

/// When a training run counts as converged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergenceCriterion {
    pub threshold: f64,
    /// Consecutive epochs at or above `threshold` required to stop.
    pub patience: usize,
    pub max_epochs: usize,
    /// Ignore the threshold and always train for `max_epochs`.
    pub fixed_budget: bool,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self {
            threshold: 0.99,
            patience: 5,
            max_epochs: 500,
            fixed_budget: false,
        }
    }
}

impl ConvergenceCriterion {
    pub fn budget(epochs: usize) -> Self {
        Self {
            max_epochs: epochs,
            fixed_budget: true,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(format!("threshold must lie in (0, 1], got {}", self.threshold));
        }
        if self.patience == 0 {
            return Err("patience must be at least 1".into());
        }
        if !self.fixed_budget && self.max_epochs < self.patience {
            return Err(format!(
                "max_epochs {} is smaller than patience {}",
                self.max_epochs, self.patience
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochPoint {
    pub epoch: usize,
    /// Running accuracy over the epoch's mini-batches.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundResult {
    pub round: usize,
    /// Which stage of the protocol produced this round, e.g. `phase2`.
    pub phase: String,
    /// Independent variable for curves: samples available, checkpoint
    /// epoch, or target fraction, depending on the protocol.
    pub x: f64,
    pub n_train: usize,
    /// Initializer applied before this round.
    pub initializer: String,
    pub epochs_used: usize,
    pub converged: bool,
    pub steps: u64,
    /// Gradient steps since the start of the record (train-time proxy).
    pub cumulative_steps: u64,
    pub examples_processed: u64,
    pub cumulative_examples: u64,
    pub train_accuracy: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_loss: f64,
    pub optimizer_resets: u64,
    /// Gradient norms on old vs new data, measured right after initialization.
    pub grad_split: Option<GradSplit>,
    /// Weight correlation between this round's initialization and its result.
    pub init_correlation: Option<f64>,
    pub history: Vec<EpochPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub protocol: String,
    pub series: String,
    pub seed: u64,
    /// Grid coordinates; empty outside grid sweeps.
    pub cell: BTreeMap<String, f64>,
    pub initializer: Initializer,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub rounds: Vec<RoundResult>,
    /// Derived per-record quantities, e.g. checkpoint damage.
    pub summary: BTreeMap<String, f64>,
}

impl ExperimentRecord {
    /// Series label for a round; protocols that mix phases in one record
    /// keep them apart.
    pub fn series_for(&self, round: &RoundResult) -> String {
        match self.protocol.as_str() {
            "checkpoint" | "two_phase" => format!("{}/{}", self.series, round.phase),
            _ => self.series.clone(),
        }
    }

    pub fn last_round(&self) -> &RoundResult {
        self.rounds.last().expect("records hold at least one round")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] Error),
    #[error(
        "training diverged in {protocol} (seed {seed}) at epoch {epoch}: non-finite loss, parameter norm {param_norm}"
    )]
    Diverged {
        protocol: String,
        seed: u64,
        epoch: usize,
        param_norm: f64,
        /// Records completed before the failure, plus the failing one up to
        /// its last finished round.
        partial: Vec<ExperimentRecord>,
    },
}

/// Failure inside one training run, before protocol context is attached.
#[derive(Debug)]
pub enum TrainError {
    Model(Error),
    NonFinite { epoch: usize, param_norm: f64 },
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Model(e)
    }
}

/// Everything a training run needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct TrainSpec<'a> {
    pub data: &'a Dataset,
    pub train: &'a [usize],
    pub val: &'a [usize],
    pub optimizer: &'a OptimizerConfig,
    pub criterion: &'a ConvergenceCriterion,
    pub confidence_beta: f64,
    pub evaluate_every_epoch: bool,
}

/// Train from `params` with a fresh optimizer state.
pub fn train_to_convergence(
    params: ModelParams,
    spec: &TrainSpec<'_>,
    seed: u64,
) -> Result<(ModelParams, RoundResult), TrainError> {
    let mut params = params;
    let mut state = OptimizerState::new(spec.optimizer, &params);
    let result = train_with_state(&mut params, &mut state, spec, seed, |_, _| {})?;
    Ok((params, result))
}

/// The training loop. `on_epoch` sees the parameters before the first
/// epoch (epoch 0) and after every completed epoch.
pub fn train_with_state(
    params: &mut ModelParams,
    state: &mut OptimizerState,
    spec: &TrainSpec<'_>,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &ModelParams),
) -> Result<RoundResult, TrainError> {
    if spec.train.is_empty() {
        return Err(Error::input("training set is empty").into());
    }
    let criterion = spec.criterion;
    let batch_size = spec.optimizer.batch_size();
    let mut steps = 0u64;
    let mut examples = 0u64;
    let mut streak = 0usize;
    let mut epochs_used = 0usize;
    let mut converged = false;
    let mut history = Vec::new();

    on_epoch(0, params);
    for epoch in 0..criterion.max_epochs {
        let mut correct = 0usize;
        for batch in data::minibatches(spec.train, batch_size, seed, epoch as u64) {
            let (x, y) = spec.data.gather(&batch);
            let (logits, cache) = nn::forward(params, x.view())?;
            let (loss, dlogits) = nn::softmax_xent(&logits, &y, spec.confidence_beta)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch: epoch + 1,
                    param_norm: params.l2_norm(),
                });
            }
            correct += nn::argmax_rows(&logits)
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            let grads = nn::backward(params, &cache, &dlogits)?;
            state.step(spec.optimizer, params, &grads)?;
            steps += 1;
            examples += batch.len() as u64;
        }
        epochs_used = epoch + 1;
        on_epoch(epochs_used, params);

        let train_accuracy = correct as f64 / spec.train.len() as f64;
        let val_accuracy = if spec.evaluate_every_epoch && !spec.val.is_empty() {
            Some(diagnostics::evaluate(params, spec.data, spec.val)?.0)
        } else {
            None
        };
        history.push(EpochPoint {
            epoch: epochs_used,
            train_accuracy,
            val_accuracy,
        });

        if train_accuracy >= criterion.threshold {
            streak += 1;
        } else {
            streak = 0;
        }
        if streak >= criterion.patience {
            converged = true;
            if !criterion.fixed_budget {
                break;
            }
        }
    }

    let (train_accuracy, train_loss) = diagnostics::evaluate(params, spec.data, spec.train)?;
    if !train_loss.is_finite() || !params.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: epochs_used,
            param_norm: params.l2_norm(),
        });
    }
    let (val_accuracy, val_loss) = if spec.val.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        diagnostics::evaluate(params, spec.data, spec.val)?
    };

    Ok(RoundResult {
        round: 0,
        phase: String::new(),
        x: spec.train.len() as f64,
        n_train: spec.train.len(),
        initializer: String::new(),
        epochs_used,
        converged,
        steps,
        cumulative_steps: steps,
        examples_processed: examples,
        cumulative_examples: examples,
        train_accuracy,
        train_loss,
        val_accuracy,
        val_loss,
        optimizer_resets: state.reset_count(),
        grad_split: None,
        init_correlation: None,
        history,
    })
}

/// Datasets a protocol runs on.
#[derive(Debug, Clone)]
pub struct ProtocolData {
    pub main: Dataset,
    /// Pre-training source, only for the crossover protocol.
    pub source: Option<Dataset>,
}

impl ProtocolData {
    pub fn new(main: Dataset) -> Self {
        Self { main, source: None }
    }
}

/// Shared per-run context: the resolved config, its echo, and the seed.
struct Run<'a> {
    cfg: &'a RunConfig,
    protocol: &'static str,
    seed: u64,
    config_json: serde_json::Value,
    config_hash: String,
    cell: BTreeMap<String, f64>,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, protocol: &'static str, seed: u64) -> Self {
        Self {
            cfg,
            protocol,
            seed,
            config_json: cfg.to_json(),
            config_hash: cfg.hash(),
            cell: BTreeMap::new(),
        }
    }

    fn record(&self, initializer: Initializer, series: String) -> ExperimentRecord {
        ExperimentRecord {
            protocol: self.protocol.to_string(),
            series,
            seed: self.seed,
            cell: self.cell.clone(),
            initializer,
            config_hash: self.config_hash.clone(),
            config: self.config_json.clone(),
            rounds: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    fn network(&self, data: &Dataset) -> Result<NetworkSpec, HarnessError> {
        let spec = self.cfg.model.network(data.dim(), data.num_classes);
        spec.validate()?;
        Ok(spec)
    }

    fn split(&self, data: &Dataset) -> Result<(Vec<usize>, Vec<usize>), HarnessError> {
        Ok(data::holdout_indices(
            data.len(),
            self.cfg.val_fraction,
            seeds::derive(self.seed, "split", 0),
        )?)
    }

    fn train_spec<'d>(
        &self,
        data: &'d Dataset,
        train: &'d [usize],
        val: &'d [usize],
        optimizer: &'d OptimizerConfig,
    ) -> TrainSpec<'d>
    where
        'a: 'd,
    {
        TrainSpec {
            data,
            train,
            val,
            optimizer,
            criterion: &self.cfg.convergence,
            confidence_beta: self.cfg.confidence_beta,
            evaluate_every_epoch: self.cfg.evaluate_every_epoch,
        }
    }

    fn diverged(&self, e: TrainError, partial: Vec<ExperimentRecord>) -> HarnessError {
        match e {
            TrainError::Model(e) => HarnessError::Model(e),
            TrainError::NonFinite { epoch, param_norm } => HarnessError::Diverged {
                protocol: self.protocol.to_string(),
                seed: self.seed,
                epoch,
                param_norm,
                partial,
            },
        }
    }
}

fn prefix_of_permutation(indices: &[usize], count: usize, seed: u64, tag: &str) -> Vec<usize> {
    let mut order = indices.to_vec();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeds::rng(seed, tag, 0));
    order.truncate(count);
    order
}

fn fraction_count(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n)
}

fn init_label(init: &Initializer) -> String {
    init.to_string()
}

/// Two-phase warm-start experiment: train on `first_fraction` of the
/// training split, then on all of it from each configured initializer.
/// Returns one record per initializer; phase one is shared.
pub fn run_two_phase(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let fraction = cfg.two_phase.first_fraction;
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(HarnessError::Config(format!(
            "first-phase fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let run = Run::new(cfg, "two_phase", seed);
    two_phase_with(&run, data)
}

fn two_phase_with(run: &Run<'_>, data: &Dataset) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let cfg = run.cfg;
    let seed = run.seed;
    let net = run.network(data)?;
    let (train, val) = run.split(data)?;
    let n_first = fraction_count(train.len(), cfg.two_phase.first_fraction);
    let mut order = train.clone();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeds::rng(seed, "phase1", 0));
    let first: Vec<usize> = order[..n_first].to_vec();
    let second: Vec<usize> = order[n_first..].to_vec();

    let start = init_params(&net, seeds::derive(seed, "init", 0));
    let phase1_spec = run.train_spec(data, &first, &val, cfg.phase1_optimizer());
    let (phase1_params, mut phase1) =
        train_to_convergence(start, &phase1_spec, seeds::derive(seed, "train", 0))
            .map_err(|e| run.diverged(e, Vec::new()))?;
    phase1.phase = "phase1".into();
    phase1.initializer = "init".into();

    let mut records = Vec::new();
    for init in cfg.resolved_initializers() {
        let mut record = run.record(init, init_label(&init));
        record.rounds.push(phase1.clone());
        let start = init.apply(&phase1_params, seeds::derive(seed, "reinit", 1))?;
        let grad_split = if cfg.two_phase.grad_split && !second.is_empty() {
            Some(diagnostics::grad_norm_split(&start, &first, &second, data)?)
        } else {
            None
        };
        let spec = run.train_spec(data, &train, &val, &cfg.optimizer);
        let (final_params, mut phase2) =
            match train_to_convergence(start.clone(), &spec, seeds::derive(seed, "train", 1)) {
                Ok(v) => v,
                Err(e) => {
                    records.push(record);
                    return Err(run.diverged(e, records));
                }
            };
        phase2.round = 1;
        phase2.phase = "phase2".into();
        phase2.initializer = init_label(&init);
        phase2.cumulative_steps += phase1.cumulative_steps;
        phase2.cumulative_examples += phase1.cumulative_examples;
        phase2.grad_split = grad_split;
        phase2.init_correlation = diagnostics::weight_correlation(&start, &final_params).ok();
        record.rounds.push(phase2);
        records.push(record);
    }
    Ok(records)
}

/// Online learning: `k_stream` new samples arrive each round; the model is
/// re-initialized by each policy and trained to convergence on everything
/// seen so far. The optimizer state is reset at every round boundary.
pub fn run_online(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let run = Run::new(cfg, "online", seed);
    let mut records = Vec::new();
    for init in cfg.resolved_initializers() {
        online_with(&run, data, init, &mut records)?;
    }
    Ok(records)
}

fn online_with(
    run: &Run<'_>,
    data: &Dataset,
    init: Initializer,
    records: &mut Vec<ExperimentRecord>,
) -> Result<(), HarnessError> {
    let cfg = run.cfg;
    let seed = run.seed;
    let net = run.network(data)?;
    let (train, val) = run.split(data)?;
    if cfg.online.k_stream == 0 || cfg.online.k_stream > train.len() {
        return Err(HarnessError::Config(format!(
            "stream round size {} must lie in [1, {}]",
            cfg.online.k_stream,
            train.len()
        )));
    }
    let stream = data::make_stream(&train, cfg.online.k_stream, seeds::derive(seed, "stream", 0))?;
    let available = stream.full_rounds();
    let rounds = cfg.online.rounds.map_or(available, |r| r.min(available));

    let mut record = run.record(init, init_label(&init));
    let mut params = init_params(&net, seeds::derive(seed, "init", 0));
    let mut state = OptimizerState::new(&cfg.optimizer, &params);
    let mut cumulative_steps = 0;
    let mut cumulative_examples = 0;
    for r in 0..rounds {
        let seen = stream.accumulated(r);
        let (label, start) = if r == 0 {
            ("init".to_string(), params.clone())
        } else {
            (
                init_label(&init),
                init.apply(&params, seeds::derive(seed, "reinit", r as u64))?,
            )
        };
        let grad_split = if cfg.online.grad_split && r > 0 {
            let old = stream.accumulated(r - 1);
            Some(diagnostics::grad_norm_split(&start, &old, &stream.rounds[r], data)?)
        } else {
            None
        };
        state.reset();
        params = start.clone();
        let spec = run.train_spec(data, &seen, &val, &cfg.optimizer);
        let mut result = match train_with_state(
            &mut params,
            &mut state,
            &spec,
            seeds::derive(seed, "train", r as u64),
            |_, _| {},
        ) {
            Ok(v) => v,
            Err(e) => {
                let mut partial = std::mem::take(records);
                partial.push(record);
                return Err(run.diverged(e, partial));
            }
        };
        cumulative_steps += result.steps;
        cumulative_examples += result.examples_processed;
        result.round = r;
        result.phase = "round".into();
        result.x = seen.len() as f64;
        result.initializer = label;
        result.cumulative_steps = cumulative_steps;
        result.cumulative_examples = cumulative_examples;
        result.grad_split = grad_split;
        result.init_correlation = diagnostics::weight_correlation(&start, &params).ok();
        record.rounds.push(result);
    }
    records.push(record);
    Ok(())
}

/// Grid cells: the Cartesian product of the axes, then any extra cells.
pub fn grid_cells(cfg: &RunConfig) -> Vec<BTreeMap<GridAxis, f64>> {
    let mut cells = vec![BTreeMap::new()];
    for (axis, values) in &cfg.grid.axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for &v in values {
                let mut c = cell.clone();
                c.insert(*axis, v);
                next.push(c);
            }
        }
        cells = next;
    }
    cells.extend(cfg.grid.extra_cells.iter().cloned());
    cells
}

/// The base-protocol configuration for one grid cell. Cells that set
/// `lambda` or `noise_scale` run a single shrink-perturb initializer.
pub fn cell_config(cfg: &RunConfig, cell: &BTreeMap<GridAxis, f64>) -> Result<RunConfig, HarnessError> {
    let mut c = cfg.clone();
    c.protocol = cfg.grid.base;
    for (&axis, &v) in cell {
        match axis {
            GridAxis::Lambda => c.reinit.lambda = v,
            GridAxis::NoiseScale => c.reinit.noise_scale = v,
            GridAxis::BatchSize => {
                if !(v >= 1.0 && v.fract() == 0.0) {
                    return Err(HarnessError::Config(format!("batch size {v} is not a positive integer")));
                }
                c.optimizer.set_batch_size(v as usize);
                if let Some(p1) = c.phase1_optimizer.as_mut() {
                    p1.set_batch_size(v as usize);
                }
            }
            GridAxis::LearningRate => {
                c.optimizer.set_learning_rate(v);
                if let Some(p1) = c.phase1_optimizer.as_mut() {
                    p1.set_learning_rate(v);
                }
            }
            GridAxis::WeightDecay => {
                c.optimizer.set_weight_decay(v);
                if let Some(p1) = c.phase1_optimizer.as_mut() {
                    p1.set_weight_decay(v);
                }
            }
            GridAxis::ConfidenceBeta => c.confidence_beta = v,
            GridAxis::FirstFraction => c.two_phase.first_fraction = v,
        }
    }
    if cell.contains_key(&GridAxis::Lambda) || cell.contains_key(&GridAxis::NoiseScale) {
        c.initializers = vec![crate::config::InitializerName::ShrinkPerturb];
    }
    c.validate()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(c)
}

fn cell_label(cell: &BTreeMap<GridAxis, f64>) -> String {
    cell.iter()
        .map(|(a, v)| format!("{}={v}", a.name()))
        .collect::<Vec<_>>()
        .join(",")
}

/// Run one grid cell for one seed.
pub fn run_grid_cell(
    cfg: &RunConfig,
    cell: &BTreeMap<GridAxis, f64>,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let cell_cfg = cell_config(cfg, cell)?;
    let mut run = Run::new(&cell_cfg, "grid", seed);
    // Echo the grid config, not the derived per-cell one.
    run.config_json = cfg.to_json();
    run.config_hash = cfg.hash();
    run.cell = cell.iter().map(|(a, v)| (a.name().to_string(), *v)).collect();
    let sp_cell = cell.contains_key(&GridAxis::Lambda) || cell.contains_key(&GridAxis::NoiseScale);
    let mut records = match cell_cfg.protocol {
        Protocol::TwoPhase => two_phase_with(&run, data)?,
        Protocol::Online => {
            let mut out = Vec::new();
            for init in cell_cfg.resolved_initializers() {
                online_with(&run, data, init, &mut out)?;
            }
            out
        }
        other => {
            return Err(HarnessError::Config(format!(
                "grid base protocol must be two_phase or online, got {}",
                other.name()
            )))
        }
    };
    let label = cell_label(cell);
    for r in &mut records {
        r.series = if sp_cell {
            label.clone()
        } else {
            format!("{label}|{}", r.series)
        };
    }
    Ok(records)
}

/// Every cell for every seed in `seeds`, cell-major.
pub fn run_grid_sweep(
    cfg: &RunConfig,
    data: &Dataset,
    seeds: &[u64],
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    if cfg.grid.axes.is_empty() || cfg.grid.axes.values().any(Vec::is_empty) {
        return Err(HarnessError::Config("grid axes must be nonempty".into()));
    }
    let mut out = Vec::new();
    for cell in grid_cells(cfg) {
        for &seed in seeds {
            out.extend(run_grid_cell(cfg, &cell, data, seed)?);
        }
    }
    Ok(out)
}

/// Checkpoint-timing study: phase one trains for a fixed budget on
/// `first_fraction` of the data, saving a snapshot every `interval`
/// epochs (including epoch 0). Each snapshot seeds a phase-two run on all
/// data; damage is the random-init validation accuracy minus the
/// snapshot-initialized one.
pub fn run_checkpoint_warmstart(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let c = &cfg.checkpoint;
    if c.interval == 0 || c.interval > c.budget {
        return Err(HarnessError::Config(format!(
            "checkpoint interval {} must lie in [1, budget {}]",
            c.interval, c.budget
        )));
    }
    let run = Run::new(cfg, "checkpoint", seed);
    let net = run.network(data)?;
    let (train, val) = run.split(data)?;
    let n_first = fraction_count(train.len(), c.first_fraction);
    let first = prefix_of_permutation(&train, n_first, seed, "phase1");

    let budget = ConvergenceCriterion::budget(c.budget);
    let mut phase1_spec = run.train_spec(data, &first, &val, cfg.phase1_optimizer());
    phase1_spec.criterion = &budget;
    let mut snapshots: Vec<(usize, ModelParams)> = Vec::new();
    let mut params = init_params(&net, seeds::derive(seed, "init", 0));
    let mut state = OptimizerState::new(cfg.phase1_optimizer(), &params);
    let mut phase1 = train_with_state(
        &mut params,
        &mut state,
        &phase1_spec,
        seeds::derive(seed, "train", 0),
        |epoch, p| {
            if epoch % c.interval == 0 {
                snapshots.push((epoch, p.clone()));
            }
        },
    )
    .map_err(|e| run.diverged(e, Vec::new()))?;
    phase1.phase = "phase1".into();
    phase1.initializer = "init".into();
    phase1.x = c.budget as f64;

    let spec = run.train_spec(data, &train, &val, &cfg.optimizer);
    let phase2_seed = seeds::derive(seed, "train", 1);
    let reinit_seed = seeds::derive(seed, "reinit", 1);
    let random_start = init_params(&net, reinit_seed);
    let (_, mut baseline) = train_to_convergence(random_start, &spec, phase2_seed)
        .map_err(|e| run.diverged(e, Vec::new()))?;
    baseline.phase = "random".into();
    baseline.initializer = "random".into();
    baseline.x = 0.0;

    let mut records = Vec::new();
    for init in cfg.resolved_initializers() {
        if init.ignores_previous() {
            continue;
        }
        let mut record = run.record(init, init_label(&init));
        record.rounds.push(phase1.clone());
        record.rounds.push(baseline.clone());
        for (i, (epoch, snapshot)) in snapshots.iter().enumerate() {
            let start = init.apply(snapshot, reinit_seed)?;
            let (_, mut result) = match train_to_convergence(start, &spec, phase2_seed) {
                Ok(v) => v,
                Err(e) => {
                    records.push(record);
                    return Err(run.diverged(e, records));
                }
            };
            result.round = i + 1;
            result.phase = "checkpoint".into();
            result.initializer = init_label(&init);
            result.x = *epoch as f64;
            record
                .summary
                .insert(format!("damage@{epoch}"), baseline.val_accuracy - result.val_accuracy);
            record.rounds.push(result);
        }
        records.push(record);
    }
    Ok(records)
}

/// Pre-training crossover: train on the source dataset, then on a growing
/// fraction of the target's training split from each initializer.
pub fn run_pretrain_crossover(
    cfg: &RunConfig,
    source: &Dataset,
    target: &Dataset,
    seed: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    if cfg.pretrain.fractions.is_empty() {
        return Err(HarnessError::Config("target fraction list is empty".into()));
    }
    if source.dim() != target.dim() || source.num_classes != target.num_classes {
        return Err(HarnessError::Config(format!(
            "source ({} features, {} classes) and target ({} features, {} classes) differ in shape",
            source.dim(),
            source.num_classes,
            target.dim(),
            target.num_classes
        )));
    }
    let run = Run::new(cfg, "pretrain_crossover", seed);
    let net = run.network(target)?;

    let (src_train, src_val) = data::holdout_indices(
        source.len(),
        cfg.val_fraction,
        seeds::derive(seed, "source_split", 0),
    )?;
    let src_spec = run.train_spec(source, &src_train, &src_val, cfg.phase1_optimizer());
    let (pretrained, mut pretrain) = train_to_convergence(
        init_params(&net, seeds::derive(seed, "init", 0)),
        &src_spec,
        seeds::derive(seed, "source_train", 0),
    )
    .map_err(|e| run.diverged(e, Vec::new()))?;
    pretrain.phase = "source".into();
    pretrain.initializer = "init".into();

    let (train, val) = run.split(target)?;
    let mut order = train.clone();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeds::rng(seed, "target_order", 0));

    let mut records = Vec::new();
    for init in cfg.resolved_initializers() {
        let mut record = run.record(init, init_label(&init));
        record.summary.insert("source_val_accuracy".into(), pretrain.val_accuracy);
        for (i, &fraction) in cfg.pretrain.fractions.iter().enumerate() {
            let subset = &order[..fraction_count(order.len(), fraction)];
            let start = init.apply(&pretrained, seeds::derive(seed, "reinit", i as u64))?;
            let spec = run.train_spec(target, subset, &val, &cfg.optimizer);
            let (_, mut result) =
                match train_to_convergence(start, &spec, seeds::derive(seed, "train", i as u64)) {
                    Ok(v) => v,
                    Err(e) => {
                        records.push(record);
                        return Err(run.diverged(e, records));
                    }
                };
            result.round = i;
            result.phase = "target".into();
            result.initializer = init_label(&init);
            result.x = fraction;
            record.rounds.push(result);
        }
        records.push(record);
    }
    Ok(records)
}

/// Iterated shrink-perturb on a fixed dataset: train to convergence, apply
/// the configured shrink-perturb, repeat for `rounds` rounds.
pub fn run_iterative_sp(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    let rounds = cfg.iterative.rounds;
    if rounds == 0 {
        return Err(HarnessError::Config("iterative protocol needs at least one round".into()));
    }
    let run = Run::new(cfg, "iterative_sp", seed);
    let net = run.network(data)?;
    let (train, val) = run.split(data)?;
    let init = Initializer::ShrinkPerturb {
        lambda: cfg.reinit.lambda,
        noise_scale: cfg.reinit.noise_scale,
    };
    let mut record = run.record(init, init_label(&init));
    let mut params = init_params(&net, seeds::derive(seed, "init", 0));
    let mut state = OptimizerState::new(&cfg.optimizer, &params);
    let spec = run.train_spec(data, &train, &val, &cfg.optimizer);
    let mut cumulative_steps = 0;
    let mut cumulative_examples = 0;
    for r in 0..rounds {
        let label = if r == 0 {
            "init".to_string()
        } else {
            params = init.apply(&params, seeds::derive(seed, "reinit", r as u64))?;
            init_label(&init)
        };
        state.reset();
        let mut result = match train_with_state(
            &mut params,
            &mut state,
            &spec,
            seeds::derive(seed, "train", r as u64),
            |_, _| {},
        ) {
            Ok(v) => v,
            Err(e) => return Err(run.diverged(e, vec![record])),
        };
        cumulative_steps += result.steps;
        cumulative_examples += result.examples_processed;
        result.round = r;
        result.phase = "round".into();
        result.x = (r + 1) as f64;
        result.initializer = label;
        result.cumulative_steps = cumulative_steps;
        result.cumulative_examples = cumulative_examples;
        record.rounds.push(result);
    }
    let best = record
        .rounds
        .iter()
        .map(|r| r.val_accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    record.summary.insert("best_val_accuracy".into(), best);
    Ok(vec![record])
}

/// Dispatch a non-grid protocol for one seed.
pub fn run_protocol(
    cfg: &RunConfig,
    data: &ProtocolData,
    seed: u64,
) -> Result<Vec<ExperimentRecord>, HarnessError> {
    match cfg.protocol {
        Protocol::TwoPhase => run_two_phase(cfg, &data.main, seed),
        Protocol::Online => run_online(cfg, &data.main, seed),
        Protocol::Checkpoint => run_checkpoint_warmstart(cfg, &data.main, seed),
        Protocol::IterativeSp => run_iterative_sp(cfg, &data.main, seed),
        Protocol::PretrainCrossover => {
            let source = data
                .source
                .as_ref()
                .ok_or_else(|| HarnessError::Config("pre-training needs a source dataset".into()))?;
            run_pretrain_crossover(cfg, source, &data.main, seed)
        }
        Protocol::Grid => run_grid_sweep(cfg, &data.main, &[seed]),
    }
}
