//! Metrics, intervention curves, seed aggregation and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use conceptlab_tensor::RngStream;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::ConceptModel;
use crate::policy::{Policy, StateBatch};

/// Fraction of rows whose argmax class equals the label.
pub fn accuracy(probs: &[f64], n_out: usize, y: &[usize]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let hits = probs
        .chunks(n_out)
        .zip(y)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count();
    hits as f64 / y.len() as f64
}

/// Mann-Whitney ROC-AUC with midranks for ties. `None` when one class is
/// absent.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&t| positive[t]).count() as f64 * midrank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Accuracy,
    /// ROC-AUC of the class-1 probability; binary tasks only.
    Auc,
}

pub fn metric_value(metric: Metric, probs: &[f64], n_out: usize, y: &[usize]) -> Result<f64> {
    match metric {
        Metric::Accuracy => Ok(accuracy(probs, n_out, y)),
        Metric::Auc => {
            if n_out != 2 {
                return Err(Error::Data("AUC task metric needs a binary task".into()));
            }
            let s: Vec<f64> = probs.chunks(2).map(|r| r[1]).collect();
            let pos: Vec<bool> = y.iter().map(|&v| v == 1).collect();
            roc_auc(&s, &pos).ok_or_else(|| Error::Data("AUC undefined: only one class present".into()))
        }
    }
}

/// Unintervened task metric on a split.
pub fn task_metric(model: &ConceptModel, split: &Split, metric: Metric) -> Result<f64> {
    let (_, probs) = model.predict(&split.x, split.len())?;
    metric_value(metric, &probs, model.config().n_outputs(), &split.y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAuc {
    pub mean: f64,
    pub per_concept: Vec<Option<f64>>,
    /// Concepts whose column holds a single class; left out of the mean.
    pub excluded: Vec<usize>,
}

pub fn concept_mean_auc_from(probs: &[f64], truth: &[f64], k: usize) -> ConceptAuc {
    let per_concept: Vec<Option<f64>> = (0..k)
        .map(|i| {
            let s: Vec<f64> = probs.iter().skip(i).step_by(k).copied().collect();
            let t: Vec<bool> = truth.iter().skip(i).step_by(k).map(|&c| c == 1.0).collect();
            roc_auc(&s, &t)
        })
        .collect();
    let excluded: Vec<usize> = (0..k).filter(|&i| per_concept[i].is_none()).collect();
    let defined: Vec<f64> = per_concept.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    ConceptAuc {
        mean,
        per_concept,
        excluded,
    }
}

pub fn concept_mean_auc(model: &ConceptModel, split: &Split) -> Result<ConceptAuc> {
    let state = model.encode(&split.x, split.len())?;
    Ok(concept_mean_auc_from(&state.probs, &split.c, split.n_concepts()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub policy: String,
    pub seed: u64,
    pub model_id: String,
    /// `(groups_intervened, metric)` for every count `0..=G`.
    pub points: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveOptions {
    pub adversarial: bool,
    /// Stop after this many groups instead of all of them.
    pub max_groups: Option<usize>,
    pub metric: Metric,
    pub model_id: String,
}

/// Intervenes group by group on every sample of `split`, following
/// `policy`, and records the task metric after each count. Expert values
/// are the ground truth, or its complement when adversarial.
pub fn run_curve(
    model: &ConceptModel,
    split: &Split,
    policy: &Policy,
    seed: u64,
    opts: &CurveOptions,
) -> Result<InterventionCurve> {
    let groups = model.config().groups.clone();
    let k = groups.n_concepts();
    if split.n_concepts() != k {
        return Err(Error::Data(format!(
            "split has {} concepts, model expects {k}",
            split.n_concepts()
        )));
    }
    let n = split.len();
    let n_out = model.config().n_outputs();
    let g_max = opts.max_groups.unwrap_or(groups.len()).min(groups.len());
    let state = model.encode(&split.x, n)?;
    let rows: Vec<usize> = (0..n).collect();
    let mut masks = vec![0.0; n * k];
    let mut experts = vec![0.5; n * k];
    let root = RngStream::new(seed);
    let mut rngs: Vec<RngStream> = (0..n).map(|i| root.split(i as u64)).collect();

    let mut points = Vec::with_capacity(g_max + 1);
    let probs = model.class_probs(&state, &rows, &masks, &experts)?;
    points.push((0, metric_value(opts.metric, &probs, n_out, &split.y)?));
    for step in 1..=g_max {
        let batch = StateBatch {
            state: &state,
            rows: &rows,
            masks: &masks,
            experts: &experts,
            truth: Some((&split.c, &split.y)),
        };
        let chosen = policy.next_groups(model, &batch, &mut rngs)?;
        for (r, &g) in chosen.iter().enumerate() {
            for &i in groups.members(g) {
                let c = split.c[r * k + i];
                masks[r * k + i] = 1.0;
                experts[r * k + i] = if opts.adversarial { 1.0 - c } else { c };
            }
        }
        let probs = model.class_probs(&state, &rows, &masks, &experts)?;
        points.push((step, metric_value(opts.metric, &probs, n_out, &split.y)?));
    }
    Ok(InterventionCurve {
        policy: policy.name().to_string(),
        seed,
        model_id: opts.model_id.clone(),
        points,
    })
}

/// Trapezoidal area under the curve divided by its last group count.
pub fn auic(curve: &InterventionCurve) -> f64 {
    let p = &curve.points;
    match p.len() {
        0 => f64::NAN,
        1 => p[0].1,
        _ => {
            let area: f64 = p
                .windows(2)
                .map(|w| (w[1].0 - w[0].0) as f64 * (w[0].1 + w[1].1) / 2.0)
                .sum();
            area / (p[p.len() - 1].0 - p[0].0) as f64
        }
    }
}

/// Metric value at a given group count.
pub fn curve_at(curve: &InterventionCurve, groups: usize) -> Option<f64> {
    curve.points.iter().find(|p| p.0 == groups).map(|p| p.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_seeds: usize,
    pub runs: Vec<SeedMetrics>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

pub fn mean_std(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Aggregate { mean, std: var.sqrt() }
}

/// Mean and population standard deviation of each metric over the runs
/// that report it.
pub fn aggregate_seeds(runs: &[SeedMetrics]) -> MetricsReport {
    let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut sorted = runs.to_vec();
    sorted.sort_by_key(|r| r.seed);
    for r in &sorted {
        for (name, &v) in &r.metrics {
            by_metric.entry(name.clone()).or_default().push(v);
        }
    }
    MetricsReport {
        n_seeds: runs.len(),
        runs: runs.to_vec(),
        aggregates: by_metric.into_iter().map(|(k, v)| (k, mean_std(&v))).collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct CurveRow {
    policy: String,
    seed: u64,
    groups_intervened: usize,
    metric: f64,
}

/// Writes one CSV per policy (`curve_<policy>.csv`) with columns
/// `policy, seed, groups_intervened, metric`, and `summary.json` holding
/// the run config, seeds and aggregates.
pub fn emit_report(
    dir: &Path,
    config: &serde_json::Value,
    report: &MetricsReport,
    curves: &[InterventionCurve],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut policies: Vec<&str> = curves.iter().map(|c| c.policy.as_str()).collect();
    policies.sort_unstable();
    policies.dedup();
    for p in policies {
        let of_policy: Vec<&InterventionCurve> = curves.iter().filter(|c| c.policy == p).collect();
        write_curves_csv(&dir.join(format!("curve_{p}.csv")), &of_policy)?;
    }
    let seeds: Vec<u64> = report.runs.iter().map(|r| r.seed).collect();
    let summary = serde_json::json!({
        "config": config,
        "seeds": seeds,
        "report": report,
        "auic": curves.iter().map(|c| serde_json::json!({
            "policy": c.policy, "seed": c.seed, "model_id": c.model_id, "auic": auic(c)
        })).collect::<Vec<_>>(),
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

pub fn write_curves_csv(path: &Path, curves: &[&InterventionCurve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in curves {
        for &(g, m) in &c.points {
            w.serialize(CurveRow {
                policy: c.policy.clone(),
                seed: c.seed,
                groups_intervened: g,
                metric: m,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads curves back, one per `(policy, seed)` in file order.
pub fn read_curves_csv(path: &Path) -> Result<Vec<InterventionCurve>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<InterventionCurve> = Vec::new();
    for row in r.deserialize::<CurveRow>() {
        let row = row?;
        match out.last_mut() {
            Some(c) if c.policy == row.policy && c.seed == row.seed && row.groups_intervened > 0 => {
                c.points.push((row.groups_intervened, row.metric));
            }
            _ => out.push(InterventionCurve {
                policy: row.policy,
                seed: row.seed,
                model_id: String::new(),
                points: vec![(row.groups_intervened, row.metric)],
            }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: Vec<(usize, f64)>) -> InterventionCurve {
        InterventionCurve {
            policy: "random".into(),
            seed: 0,
            model_id: String::new(),
            points,
        }
    }

    #[test]
    fn auc_examples() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let y = [false, false, true, true];
        assert_eq!(roc_auc(&s, &y), Some(0.75));
        assert_eq!(roc_auc(&[0.3; 4], &y), Some(0.5));
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &y), Some(1.0));
        assert_eq!(roc_auc(&s, &[true; 4]), None);
    }

    #[test]
    fn accuracy_of_perfect_predictor() {
        let p = [0.9, 0.1, 0.2, 0.8];
        assert_eq!(accuracy(&p, 2, &[0, 1]), 1.0);
        assert_eq!(metric_value(Metric::Auc, &p, 2, &[0, 1]).unwrap(), 1.0);
    }

    #[test]
    fn auic_examples() {
        assert!((auic(&curve(vec![(0, 0.4), (1, 0.4), (2, 0.4)])) - 0.4).abs() < 1e-15);
        assert!((auic(&curve(vec![(0, 0.0), (1, 0.5), (2, 1.0)])) - 0.5).abs() < 1e-15);
        assert!((auic(&curve(vec![(0, 0.6), (1, 0.8)])) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn seed_aggregation() {
        let run = |seed, v| SeedMetrics {
            seed,
            metrics: BTreeMap::from([("acc".to_string(), v)]),
        };
        let r = aggregate_seeds(&[run(1, 1.0), run(2, 3.0)]);
        assert_eq!(r.aggregates["acc"], Aggregate { mean: 2.0, std: 1.0 });
        let swapped = aggregate_seeds(&[run(2, 3.0), run(1, 1.0)]);
        assert_eq!(swapped.aggregates, r.aggregates);
        assert_eq!(aggregate_seeds(&[run(1, 0.7)]).aggregates["acc"].std, 0.0);
    }

    #[test]
    fn single_class_concept_is_excluded() {
        let probs = [0.2, 0.9, 0.7, 0.8, 0.4, 0.1];
        let truth = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        let r = concept_mean_auc_from(&probs, &truth, 2);
        assert_eq!(r.excluded, vec![1]);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let curves = vec![
            curve(vec![(0, 0.5), (1, 0.75), (2, 1.0)]),
            InterventionCurve { seed: 1, ..curve(vec![(0, 0.25), (1, 0.5), (2, 0.125)]) },
        ];
        let report = aggregate_seeds(&[]);
        let cfg = serde_json::json!({"lambda_roll": 1.0});
        emit_report(dir.path(), &cfg, &report, &curves).unwrap();
        let back = read_curves_csv(&dir.path().join("curve_random.csv")).unwrap();
        assert_eq!(back, curves);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["config"], cfg);
    }
}
