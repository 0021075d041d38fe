//! Run configs and the experiment drivers shared by the CLI and tests.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use conceptlab_core::data::{split_validation, Dataset, DatasetSpec, Split, SyntheticTaskSpec};
use conceptlab_core::eval::{auic, concept_mean_auc, run_curve, task_metric, CurveOptions, Metric};
use conceptlab_core::model::{ModelConfig, Variant};
use conceptlab_core::policy::{
    bc_train, grid_search_coop, static_order_cva, static_order_cvi, BcConfig, CoopConfig, Policy, PolicyKind,
};
use conceptlab_core::train::{train_variant, TrainConfig, TrainReport};
use conceptlab_tensor::RngStream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TrainingMeta};

/// Architecture choices that do not depend on the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    #[serde(default = "default_emb_width")]
    pub emb_width: usize,
    #[serde(default = "default_hidden")]
    pub hidden_f: Vec<usize>,
    #[serde(default = "default_hidden_psi")]
    pub hidden_psi: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub backbone_hidden: Vec<usize>,
}

fn default_emb_width() -> usize {
    16
}

fn default_hidden() -> Vec<usize> {
    vec![32]
}

fn default_hidden_psi() -> Vec<usize> {
    vec![128, 128, 64, 64]
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            emb_width: default_emb_width(),
            hidden_f: default_hidden(),
            hidden_psi: default_hidden_psi(),
            backbone_hidden: default_hidden(),
        }
    }
}

/// A complete training run: dataset, architecture and optimisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// The default synthetic concept-incomplete task with desk-scale
    /// training settings.
    pub fn synthetic(variant: Variant, seed: u64) -> Self {
        Self {
            dataset: DatasetSpec::Synthetic(SyntheticTaskSpec::default()),
            model: ModelSpec::new(variant),
            train: TrainConfig {
                epochs_max: 150,
                batch_size: 128,
                lambda_concept: 0.5,
                seed,
                ..TrainConfig::default()
            },
        }
    }

    pub fn model_config(&self, split: &Split) -> ModelConfig {
        ModelConfig {
            n_inputs: split.n_inputs,
            n_concepts: split.n_concepts(),
            emb_width: self.model.emb_width,
            n_classes: split.n_classes,
            groups: split.groups.clone(),
            hidden_f: self.model.hidden_f.clone(),
            hidden_psi: self.model.hidden_psi.clone(),
            backbone_hidden: self.model.backbone_hidden.clone(),
            variant: self.model.variant,
        }
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run configs serialize");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text).context("parsing run config")?)
    }
}

/// Dataset of a run with the train/validation split applied.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub train: Split,
    pub val: Split,
}

pub fn prepare(dataset: &DatasetSpec, train: &TrainConfig) -> Result<Prepared> {
    let data = dataset.build().context("building dataset")?;
    let (tr, val) = split_validation(&data.train, train.val_fraction, train.seed)?;
    Ok(Prepared { data, train: tr, val })
}

/// Rebuilds the data a checkpoint was trained on.
pub fn prepare_for(ck: &Checkpoint) -> Result<Prepared> {
    let (Some(ds), Some(tc)) = (&ck.meta.dataset, &ck.meta.train) else {
        bail!("checkpoint does not record its dataset and training config");
    };
    prepare(ds, tc)
}

pub fn train_run(run: &RunConfig) -> Result<(Checkpoint, TrainReport, Prepared)> {
    let prep = prepare(&run.dataset, &run.train)?;
    let cfg = run.model_config(&prep.train);
    let (model, report) = train_variant(&cfg, &prep.train, &prep.val, &run.train)?;
    let mut final_metrics = BTreeMap::new();
    final_metrics.insert("test_task_accuracy".into(), task_metric(&model, &prep.data.test, Metric::Accuracy)?);
    final_metrics.insert("test_concept_auc".into(), concept_mean_auc(&model, &prep.data.test)?.mean);
    final_metrics.insert("best_val_loss".into(), report.best_val_loss);
    let meta = TrainingMeta {
        seed: run.train.seed,
        config_hash: run.hash(),
        dataset: Some(run.dataset.clone()),
        train: Some(run.train.clone()),
        final_metrics,
    };
    Ok((Checkpoint::new(model, meta), report, prep))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda_roll: f64,
    pub val_auic: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub selected_lambda_roll: f64,
    pub selected_auic: f64,
}

pub const SWEEP_LAMBDAS: [f64; 3] = [5.0, 1.0, 0.1];

/// Trains one model per `λ_roll` and keeps the one with the highest
/// validation AUIC under its own learned policy (ties keep the earlier
/// value).
pub fn sweep(run: &RunConfig, lambdas: &[f64]) -> Result<(SweepResult, Checkpoint)> {
    if lambdas.is_empty() {
        bail!("no λ_roll values to sweep");
    }
    let mut entries = Vec::new();
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    for &lambda in lambdas {
        let mut r = run.clone();
        r.train.lambda_roll = lambda;
        let (ck, _, prep) = train_run(&r)?;
        let policy = if ck.model.config().variant.has_policy() { Policy::LearnedPsi } else { Policy::Random };
        let curve = run_curve(&ck.model, &prep.val, &policy, r.train.seed, &CurveOptions::default())?;
        let a = auic(&curve);
        entries.push(SweepEntry { lambda_roll: lambda, val_auic: a });
        if best.as_ref().map_or(true, |(_, b, _)| a > *b) {
            best = Some((lambda, a, ck));
        }
    }
    let (selected_lambda_roll, selected_auic, ck) = best.expect("nonempty sweep");
    Ok((
        SweepResult {
            entries,
            selected_lambda_roll,
            selected_auic,
        },
        ck,
    ))
}

/// Instantiates a policy for a trained model. Static orders and the CooP
/// grid are fit on `val`; BC-Skyline uses the checkpoint's policy when it
/// has one and trains one otherwise.
pub fn build_policy(
    kind: PolicyKind,
    ck: &Checkpoint,
    val: &Split,
    train: &Split,
    coop: Option<CoopConfig>,
    seed: u64,
) -> Result<Policy> {
    let model = &ck.model;
    Ok(match kind {
        PolicyKind::Random => Policy::Random,
        PolicyKind::Ucp => Policy::Ucp,
        PolicyKind::Coop => Policy::Coop(match coop {
            Some(c) => c,
            None => grid_search_coop(model, val, seed)?.best,
        }),
        PolicyKind::Cva => Policy::Cva(static_order_cva(model, val)?),
        PolicyKind::Cvi => Policy::Cvi(static_order_cvi(model, val)?),
        PolicyKind::Skyline => Policy::Skyline,
        PolicyKind::LearnedPsi => {
            if !model.config().variant.has_policy() {
                bail!("{} models have no learned policy", model.config().variant);
            }
            Policy::LearnedPsi
        }
        PolicyKind::BcSkyline => match &ck.bc {
            Some(bc) => Policy::BcSkyline(bc.clone()),
            None => {
                let (bc, _) = bc_train(model, train, &BcConfig::default(), &mut RngStream::new(seed).split_named("bc"))?;
                Policy::BcSkyline(bc)
            }
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_round_trips_and_hashes_stably() {
        let run = RunConfig::synthetic(Variant::IntCem, 3);
        let text = serde_json::to_string_pretty(&run).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, run);
        assert_eq!(back.hash(), run.hash());
        assert_eq!(run.hash().len(), 64);
        let other = RunConfig::synthetic(Variant::IntCem, 4);
        assert_ne!(other.hash(), run.hash());
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let run = RunConfig::from_json(
            r#"{"dataset": {"kind": "synthetic", "group_sizes": [2, 2], "noise": [0.1, 0.1],
                "weights": [0, 1, 0, 1], "threshold": 1.0, "jitter": 0.1, "incomplete_fraction": 0.0,
                "n_train": 10, "n_test": 5},
               "model": {"variant": "CEM"}}"#,
        )
        .unwrap();
        assert_eq!(run.model.emb_width, 16);
        assert_eq!(run.train.gamma, 1.1);
    }
}
