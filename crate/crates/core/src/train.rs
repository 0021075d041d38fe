//! Training loops for every model variant.
//!
//! IntCEM steps sample one initial mask and horizon per batch, roll the
//! policy forward with per-sample Gumbel noise, and combine the rollout,
//! task and concept losses. CEMs train with random interventions; CBMs are
//! trained jointly, sequentially or independently.

use std::path::Path;

use conceptlab_tensor::{clip_global_norm, gumbel_softmax, RngStream, Sgd, SgdConfig, Tape, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{split_validation, Split};
use crate::error::{config_err, Error, Result};
use crate::eval::{accuracy, concept_mean_auc_from};
use crate::groups::Groups;
use crate::intervention::{intervene, mix_bottleneck, InterventionMask};
use crate::model::{BoundParams, ConceptModel, ConceptState, ModelConfig, Variant};
use crate::policy::{Policy, StateBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_roll: f64,
    pub lambda_concept: f64,
    pub gamma: f64,
    pub p_int: f64,
    pub t_max_start: f64,
    pub t_max_end: f64,
    pub t_max_growth: f64,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub concept_loss_weighting: bool,
    pub clip_norm: f64,
    pub val_fraction: f64,
    /// Fixes the rollout horizon instead of sampling it.
    pub force_horizon: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_roll: 1.0,
            lambda_concept: 1.0,
            gamma: 1.1,
            p_int: 0.25,
            t_max_start: 2.0,
            t_max_end: 6.0,
            t_max_growth: 1.005,
            epochs_max: 100,
            batch_size: 256,
            lr_initial: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            early_stop_patience: 15,
            plateau_patience: 10,
            plateau_factor: 0.1,
            concept_loss_weighting: true,
            clip_norm: 100.0,
            val_fraction: 0.2,
            force_horizon: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) {
            return Err(config_err("gamma must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p_int) {
            return Err(config_err("p_int must lie in [0, 1]"));
        }
        if !(self.t_max_start >= 1.0 && self.t_max_start <= self.t_max_end) {
            return Err(config_err("need 1 <= t_max_start <= t_max_end"));
        }
        if !(self.t_max_growth >= 1.0) {
            return Err(config_err("t_max_growth must be at least 1"));
        }
        if !(self.lambda_roll >= 0.0 && self.lambda_concept >= 0.0) {
            return Err(config_err("loss weights must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err("val_fraction must lie in [0, 1)"));
        }
        if self.force_horizon == Some(0) {
            return Err(config_err("forced horizon must be at least 1"));
        }
        Ok(())
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.lr_initial,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Horizon ceiling at a training step: the annealed value
/// `min(end, start * growth^step)` floored, never below `start`.
pub fn t_max(step: usize, cfg: &TrainConfig) -> usize {
    let real = (cfg.t_max_start * cfg.t_max_growth.powf(step as f64)).min(cfg.t_max_end);
    (real.floor() as usize).max(cfg.t_max_start.floor() as usize)
}

pub fn sample_horizon(step: usize, cfg: &TrainConfig, rng: &mut RngStream) -> usize {
    rng.gen_range(1..=t_max(step, cfg))
}

/// Includes every group independently with probability `p_int`.
pub fn sample_initial_mask(groups: &Groups, p_int: f64, rng: &mut RngStream) -> InterventionMask {
    let mut values = vec![0.0; groups.n_concepts()];
    for m in groups.all() {
        if rng.gen_bool(p_int) {
            for &i in m {
                values[i] = 1.0;
            }
        }
    }
    InterventionMask::from_values(values).expect("binary mask")
}

/// `(CE_0 + γ^T CE_T) / (1 + γ^T)`.
pub fn loss_pred_value(ce0: f64, ce_t: f64, gamma: f64, horizon: usize) -> f64 {
    let g = gamma.powi(horizon as i32);
    (ce0 + g * ce_t) / (1.0 + g)
}

/// Positive-class weights `(1 - f) / f` clipped to `[0.1, 10]`.
pub fn concept_pos_weights(freqs: &[f64]) -> Vec<f64> {
    freqs
        .iter()
        .map(|&f| if f <= 0.0 { 10.0 } else { ((1.0 - f) / f).clamp(0.1, 10.0) })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// The variant's full objective.
    Joint,
    /// Concept loss only (first stage of sequential/independent CBMs).
    ConceptOnly,
    /// Task loss on frozen concept predictions, or on ground-truth concepts
    /// when `from_truth`.
    LabelOnly { from_truth: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub task: f64,
    /// Task CE after the rollout (IntCEM only).
    pub task_final: f64,
    pub roll: f64,
    pub pred: f64,
    pub concept: f64,
    pub horizon: usize,
    pub grad_norm: f64,
}

/// One `(μ^(t-1), η^(t), ω^(t))` step of a rollout, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryStep {
    pub mask: Var,
    pub eta: Var,
    pub omega: Var,
    pub skyline: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub initial: Var,
    pub steps: Vec<TrajectoryStep>,
    pub final_mask: Var,
    /// Skyline group per row at each step.
    pub targets: Vec<Vec<usize>>,
}

struct Batch {
    n: usize,
    x: Vec<f64>,
    c: Vec<f64>,
    y: Vec<usize>,
}

fn gather(split: &Split, rows: &[usize]) -> Batch {
    Batch {
        n: rows.len(),
        x: rows.iter().flat_map(|&r| split.x_row(r).iter().copied()).collect(),
        c: rows.iter().flat_map(|&r| split.c_row(r).iter().copied()).collect(),
        y: rows.iter().map(|&r| split.y[r]).collect(),
    }
}

fn tile(row: &[f64], n: usize) -> Vec<f64> {
    (0..n).flat_map(|_| row.iter().copied()).collect()
}

/// Rolls ψ forward `horizon` steps from `initial` (shape `[b, k]`).
/// Interventions use the ground truth `c`; Skyline targets are computed on
/// detached values.
#[allow(clippy::too_many_arguments)]
pub fn rollout_trajectory(
    model: &ConceptModel,
    tape: &mut Tape,
    bound: &BoundParams,
    bo: &crate::model::BackboneOutput,
    c: &[f64],
    y: &[usize],
    initial: Var,
    horizon: usize,
    rng: &mut RngStream,
) -> Result<Trajectory> {
    let groups = &model.config().groups;
    let b = y.len();
    let k = groups.n_concepts();
    let state = ConceptState::from_backbone(tape, bo);
    let rows: Vec<usize> = (0..b).collect();
    let c_var = tape.constant(vec![b, k], c.to_vec())?;
    let membership = tape.constant(vec![groups.len(), k], groups.membership_matrix())?;
    let mut mask = initial;
    let mut steps = Vec::with_capacity(horizon);
    let mut targets = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let bottleneck = intervene(tape, bo, mask, c_var)?;
        let omega = model.policy_log_probs(tape, bound, bottleneck, mask)?;
        let masks = tape.value(mask).to_vec();
        let batch = StateBatch {
            state: &state,
            rows: &rows,
            masks: &masks,
            experts: c,
            truth: Some((c, y)),
        };
        let target = Policy::Skyline.next_groups(model, &batch, &mut [])?;
        let eta = gumbel_softmax(tape, omega, 1.0, true, rng)?;
        let inc = tape.matmul(eta, membership)?;
        let sum = tape.add(mask, inc)?;
        let next = tape.clamp(sum, 0.0, 1.0)?;
        steps.push(TrajectoryStep {
            mask,
            eta,
            omega,
            skyline: target[0],
        });
        targets.push(target);
        mask = next;
    }
    Ok(Trajectory {
        initial,
        steps,
        final_mask: mask,
        targets,
    })
}

/// Builds the objective of `phase` for a batch on `tape`.
#[allow(clippy::too_many_arguments)]
fn objective(
    model: &ConceptModel,
    tape: &mut Tape,
    bound: &BoundParams,
    batch: &Batch,
    cfg: &TrainConfig,
    pos_weight: Option<&[f64]>,
    phase: Phase,
    step: usize,
    rng: &RngStream,
) -> Result<(Var, LossReport)> {
    let variant = model.config().variant;
    let k = model.config().n_concepts;
    let b = batch.n;
    let x = tape.constant(vec![b, model.config().n_inputs], batch.x.clone())?;
    let mut report = LossReport::default();

    match phase {
        Phase::ConceptOnly => {
            let z = model.concept_logits(tape, bound, x)?;
            let l = tape.bce_with_logits(z, &batch.c, pos_weight)?;
            report.concept = tape.scalar(l);
            report.total = report.concept;
            return Ok((l, report));
        }
        Phase::LabelOnly { from_truth } => {
            let input = if from_truth {
                tape.constant(vec![b, k], batch.c.clone())?
            } else {
                let z = model.concept_logits(tape, bound, x)?;
                let p = tape.sigmoid(z)?;
                tape.detach(p)?
            };
            let lp = model.label_log_probs(tape, bound, input)?;
            let l = tape.cross_entropy(lp, &batch.y)?;
            report.task = tape.scalar(l);
            report.total = report.task;
            return Ok((l, report));
        }
        Phase::Joint => {}
    }

    let bo = model.backbone(tape, bound, x)?;
    let concept = tape.bce_with_logits(bo.logits, &batch.c, pos_weight)?;
    report.concept = tape.scalar(concept);
    let c_var = tape.constant(vec![b, k], batch.c.clone())?;

    let task_and_roll = match variant {
        Variant::IntCem => {
            let groups = &model.config().groups;
            let mu0 = sample_initial_mask(groups, cfg.p_int, &mut rng.split_named("mask"));
            let free = mu0.free_groups(groups).len();
            let drawn = match cfg.force_horizon {
                Some(t) => t,
                None => sample_horizon(step, cfg, &mut rng.split_named("horizon")),
            };
            let horizon = drawn.min(free);
            report.horizon = horizon;
            let initial = tape.constant(vec![b, k], tile(mu0.values(), b))?;
            let traj = if horizon > 0 {
                let mut g_rng = rng.split_named("gumbel");
                Some(rollout_trajectory(model, tape, bound, &bo, &batch.c, &batch.y, initial, horizon, &mut g_rng)?)
            } else {
                None
            };
            let final_mask = traj.as_ref().map_or(initial, |t| t.final_mask);

            let c0 = intervene(tape, &bo, initial, c_var)?;
            let lp0 = model.label_log_probs(tape, bound, c0)?;
            let ce0 = tape.cross_entropy(lp0, &batch.y)?;
            let ct = intervene(tape, &bo, final_mask, c_var)?;
            let lpt = model.label_log_probs(tape, bound, ct)?;
            let ce_t = tape.cross_entropy(lpt, &batch.y)?;
            let g = cfg.gamma.powi(horizon as i32);
            let weighted = tape.scale(ce_t, g)?;
            let sum = tape.add(ce0, weighted)?;
            let pred = tape.scale(sum, 1.0 / (1.0 + g))?;
            report.pred = tape.scalar(pred);
            report.task = tape.scalar(ce0);
            report.task_final = tape.scalar(ce_t);

            match traj {
                Some(t) if cfg.lambda_roll > 0.0 => {
                    let mut terms = Vec::with_capacity(t.steps.len());
                    for (s, target) in t.steps.iter().zip(&t.targets) {
                        terms.push(tape.cross_entropy(s.omega, target)?);
                    }
                    let mut roll = terms[0];
                    for &term in &terms[1..] {
                        roll = tape.add(roll, term)?;
                    }
                    let roll = tape.scale(roll, 1.0 / terms.len() as f64)?;
                    report.roll = tape.scalar(roll);
                    let weighted_roll = tape.scale(roll, cfg.lambda_roll)?;
                    tape.add(weighted_roll, pred)?
                }
                _ => pred,
            }
        }
        Variant::Cem => {
            let mut m_rng = rng.split_named("mask");
            let groups = model.config().groups.clone();
            let mut mu = Vec::with_capacity(b * k);
            for _ in 0..b {
                mu.extend_from_slice(sample_initial_mask(&groups, cfg.p_int, &mut m_rng).values());
            }
            let mu = tape.constant(vec![b, k], mu)?;
            let c = intervene(tape, &bo, mu, c_var)?;
            let lp = model.label_log_probs(tape, bound, c)?;
            let ce = tape.cross_entropy(lp, &batch.y)?;
            report.task = tape.scalar(ce);
            ce
        }
        _ => {
            let c = mix_bottleneck(tape, &bo)?;
            let lp = model.label_log_probs(tape, bound, c)?;
            let ce = tape.cross_entropy(lp, &batch.y)?;
            report.task = tape.scalar(ce);
            ce
        }
    };
    let weighted_concept = tape.scale(concept, cfg.lambda_concept)?;
    let total = tape.add(task_and_roll, weighted_concept)?;
    report.total = tape.scalar(total);
    Ok((total, report))
}

/// Owns a model and its optimizer state across training steps.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ConceptModel,
    pub cfg: TrainConfig,
    pub opt: Sgd,
    pos_weight: Option<Vec<f64>>,
    rng: RngStream,
    pub step: usize,
}

impl Trainer {
    /// Concept weights come from the concept frequencies of `train`.
    pub fn new(model: ConceptModel, cfg: TrainConfig, train: &Split) -> Result<Self> {
        cfg.validate()?;
        let opt = Sgd::new(cfg.sgd(), model.params())?.with_plateau(cfg.plateau_patience, cfg.plateau_factor);
        let pos_weight = cfg
            .concept_loss_weighting
            .then(|| concept_pos_weights(&train.concept_frequencies()));
        let rng = RngStream::new(cfg.seed).split_named("train");
        Ok(Self {
            model,
            cfg,
            opt,
            pos_weight,
            rng,
            step: 0,
        })
    }

    fn reset_optimizer(&mut self) -> Result<()> {
        self.opt = Sgd::new(self.cfg.sgd(), self.model.params())?
            .with_plateau(self.cfg.plateau_patience, self.cfg.plateau_factor);
        Ok(())
    }

    /// Forward and backward on `rows` of `split`, leaving gradients in the
    /// model's parameters. Does not update weights or advance the step.
    pub fn compute_gradients(&mut self, split: &Split, rows: &[usize], phase: Phase) -> Result<LossReport> {
        let batch = gather(split, rows);
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let step_rng = self.rng.split(self.step as u64);
        let (loss, mut report) = objective(
            &self.model,
            &mut tape,
            &bound,
            &batch,
            &self.cfg,
            self.pos_weight.as_deref(),
            phase,
            self.step,
            &step_rng,
        )?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{report:?}"),
            });
        }
        tape.backward_into(loss, self.model.params_mut())?;
        report.grad_norm = conceptlab_tensor::global_grad_norm(self.model.params());
        Ok(report)
    }

    /// One optimization step: gradients, global-norm clipping, SGD update.
    pub fn train_step(&mut self, split: &Split, rows: &[usize], phase: Phase) -> Result<LossReport> {
        let report = self.compute_gradients(split, rows, phase)?;
        clip_global_norm(self.model.params_mut(), self.cfg.clip_norm)?;
        self.opt.step(self.model.params_mut())?;
        self.step += 1;
        Ok(report)
    }

    /// Objective value on `split` with a fixed random stream, so successive
    /// epochs are compared on identical draws.
    pub fn evaluate_loss(&self, split: &Split, phase: Phase) -> Result<f64> {
        let n = split.len();
        if n == 0 {
            return Ok(f64::NAN);
        }
        let val_rng = RngStream::new(self.cfg.seed).split_named("validation-loss");
        let mut total = 0.0;
        let rows: Vec<usize> = (0..n).collect();
        for (i, chunk) in rows.chunks(self.cfg.batch_size).enumerate() {
            let batch = gather(split, chunk);
            let mut tape = Tape::no_grad();
            let bound = self.model.bind(&mut tape)?;
            let (_, report) = objective(
                &self.model,
                &mut tape,
                &bound,
                &batch,
                &self.cfg,
                self.pos_weight.as_deref(),
                phase,
                self.step,
                &val_rng.split(i as u64),
            )?;
            total += report.total * chunk.len() as f64;
        }
        Ok(total / n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_task_acc: f64,
    pub val_concept_auc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub steps: usize,
}

/// Patience counter on a loss that should decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
            return (true, false);
        }
        self.since_best += 1;
        (false, self.since_best >= self.patience)
    }
}

fn validation_metrics(model: &ConceptModel, val: &Split) -> Result<(f64, f64)> {
    if val.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let (state, probs) = model.predict(&val.x, val.len())?;
    let acc = accuracy(&probs, model.config().n_outputs(), &val.y);
    let auc = concept_mean_auc_from(&state.probs, &val.c, val.n_concepts()).mean;
    Ok((acc, auc))
}

fn fit_phase(trainer: &mut Trainer, train: &Split, val: &Split, phase: Phase, log: &mut Vec<EpochRecord>) -> Result<(usize, f64, bool)> {
    let n = train.len();
    if n == 0 {
        return Err(Error::Data("empty training split".into()));
    }
    let shuffle_root = trainer.rng.split_named("shuffle");
    let mut stopper = EarlyStopping::new(trainer.cfg.early_stop_patience);
    let mut best_params = trainer.model.params().flatten();
    let mut best_epoch = log.len();
    let mut stopped = false;
    let offset = log.len();
    for e in 0..trainer.cfg.epochs_max {
        let epoch = offset + e;
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle_root.split(epoch as u64));
        let mut total = 0.0;
        for chunk in order.chunks(trainer.cfg.batch_size) {
            let r = trainer.train_step(train, chunk, phase)?;
            total += r.total * chunk.len() as f64;
        }
        let train_loss = total / n as f64;
        let lr = trainer.opt.learning_rate();
        trainer.opt.observe_epoch_loss(train_loss);
        let val_loss = if val.is_empty() { train_loss } else { trainer.evaluate_loss(val, phase)? };
        let (val_task_acc, val_concept_auc) = validation_metrics(&trainer.model, val)?;
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_task_acc,
            val_concept_auc,
            lr,
        });
        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best_params = trainer.model.params().flatten();
            best_epoch = epoch;
        }
        if stop {
            stopped = true;
            break;
        }
    }
    trainer.model.params_mut().load_flat(&best_params)?;
    Ok((best_epoch, stopper.best, stopped))
}

/// Trains a model of `model_cfg` on `train`, early stopping on `val`, and
/// restores the parameters of the best validation epoch.
pub fn train_variant(model_cfg: &ModelConfig, train: &Split, val: &Split, cfg: &TrainConfig) -> Result<(ConceptModel, TrainReport)> {
    cfg.validate()?;
    let model = ConceptModel::new(model_cfg.clone(), &mut RngStream::new(cfg.seed).split_named("init"))?;
    let mut trainer = Trainer::new(model, cfg.clone(), train)?;
    let mut log = Vec::new();
    let (best_epoch, best_val_loss, stopped_early) = match model_cfg.variant {
        Variant::SequentialCbm | Variant::IndependentCbm => {
            fit_phase(&mut trainer, train, val, Phase::ConceptOnly, &mut log)?;
            trainer.reset_optimizer()?;
            let from_truth = model_cfg.variant == Variant::IndependentCbm;
            fit_phase(&mut trainer, train, val, Phase::LabelOnly { from_truth }, &mut log)?
        }
        _ => fit_phase(&mut trainer, train, val, Phase::Joint, &mut log)?,
    };
    let mut model = trainer.model;
    if model_cfg.variant == Variant::JointLogitCbm {
        model.fit_logit_anchors(&train.x, train.len())?;
    }
    Ok((
        model,
        TrainReport {
            log,
            best_epoch,
            best_val_loss,
            stopped_early,
            steps: trainer.step,
        },
    ))
}

/// Splits off the validation fraction of `data` and trains.
pub fn train_with_validation(model_cfg: &ModelConfig, data: &Split, cfg: &TrainConfig) -> Result<(ConceptModel, TrainReport)> {
    let (train, val) = split_validation(data, cfg.val_fraction, cfg.seed)?;
    train_variant(model_cfg, &train, &val, cfg)
}

pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_epoch_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
