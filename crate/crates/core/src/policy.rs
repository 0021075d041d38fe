//! Test-time concept selection policies.
//!
//! Every policy scores concept groups for a batch of intervention states
//! and the next group is the highest-scoring unintervened one, ties going
//! to the lowest index. Intervened groups score `-inf`.

use std::fmt;
use std::str::FromStr;

use conceptlab_tensor::{RngStream, Sgd, SgdConfig, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{config_err, Error, Result};
use crate::eval::{self, CurveOptions};
use crate::groups::Groups;
use crate::model::{ConceptModel, ConceptState, MlpNet};

pub const UCP_EPSILON: f64 = 1e-6;
/// Groups up to this size get an exact joint expectation in CooP.
pub const COOP_MAX_JOINT: usize = 12;
pub const COOP_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
/// Intervention budgets (fractions of all groups) scored by the CooP grid.
pub const COOP_BUDGETS: [f64; 4] = [0.01, 0.05, 0.25, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    Ucp,
    Coop,
    Cva,
    Cvi,
    Skyline,
    LearnedPsi,
    BcSkyline,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 8] = [
        PolicyKind::Random,
        PolicyKind::Ucp,
        PolicyKind::Coop,
        PolicyKind::Cva,
        PolicyKind::Cvi,
        PolicyKind::Skyline,
        PolicyKind::LearnedPsi,
        PolicyKind::BcSkyline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Ucp => "ucp",
            PolicyKind::Coop => "coop",
            PolicyKind::Cva => "cva",
            PolicyKind::Cvi => "cvi",
            PolicyKind::Skyline => "skyline",
            PolicyKind::LearnedPsi => "learned_psi",
            PolicyKind::BcSkyline => "bc_skyline",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "psi" => return Ok(PolicyKind::LearnedPsi),
            "bc" => return Ok(PolicyKind::BcSkyline),
            _ => {}
        }
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| config_err(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoopConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Acquisition-cost weight; only the uniform-cost setting is supported.
    #[serde(default)]
    pub gamma: f64,
}

impl Default for CoopConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.0,
        }
    }
}

impl CoopConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let c = Self { alpha, beta, gamma: 0.0 };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(config_err("CooP weights must be non-negative"));
        }
        if self.gamma != 0.0 {
            return Err(config_err("CooP acquisition costs are not supported; gamma must be 0"));
        }
        Ok(())
    }
}

/// Fixed group order used for every sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticOrder(pub Vec<usize>);

impl StaticOrder {
    /// Group indices sorted by descending score, ties in index order.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Self(idx)
    }

    pub fn validate(&self, n_groups: usize) -> Result<()> {
        let mut seen = vec![false; n_groups];
        for &g in &self.0 {
            if g >= n_groups || std::mem::replace(&mut seen[g], true) {
                return Err(config_err("static order is not a permutation of the groups"));
            }
        }
        if self.0.len() != n_groups {
            return Err(config_err("static order is not a permutation of the groups"));
        }
        Ok(())
    }

    /// Descending `n - position`, so the first listed group scores highest.
    fn scores(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.0.len()];
        for (pos, &g) in self.0.iter().enumerate() {
            s[g] = (self.0.len() - pos) as f64;
        }
        s
    }
}

/// Behavioural clone of the Skyline oracle over `(bottleneck, mask)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BcPolicy {
    pub net: MlpNet,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Random,
    Ucp,
    Coop(CoopConfig),
    Cva(StaticOrder),
    Cvi(StaticOrder),
    Skyline,
    LearnedPsi,
    BcSkyline(BcPolicy),
}

/// A batch of intervention states over rows of a [`ConceptState`].
/// `masks`, `experts` and `truth` are flat `[rows.len(), k]`.
#[derive(Debug, Clone, Copy)]
pub struct StateBatch<'a> {
    pub state: &'a ConceptState,
    pub rows: &'a [usize],
    pub masks: &'a [f64],
    pub experts: &'a [f64],
    pub truth: Option<(&'a [f64], &'a [usize])>,
}

impl<'a> StateBatch<'a> {
    fn k(&self) -> usize {
        self.state.k
    }

    fn mask_row(&self, r: usize) -> &'a [f64] {
        &self.masks[r * self.k()..(r + 1) * self.k()]
    }

    fn expert_row(&self, r: usize) -> &'a [f64] {
        &self.experts[r * self.k()..(r + 1) * self.k()]
    }

    fn check(&self, model: &ConceptModel) -> Result<()> {
        let k = model.config().n_concepts;
        let n = self.rows.len();
        if self.state.k != k || self.masks.len() != n * k || self.experts.len() != n * k {
            return Err(Error::Policy("state batch does not match the model".into()));
        }
        if let Some((c, y)) = self.truth {
            if c.len() != n * k || y.len() != n {
                return Err(Error::Policy("ground truth does not match the state batch".into()));
            }
        }
        Ok(())
    }
}

pub fn group_intervened(groups: &Groups, mask_row: &[f64], g: usize) -> bool {
    groups.members(g).iter().all(|&i| mask_row[i] >= 1.0)
}

pub fn free_groups(groups: &Groups, mask_row: &[f64]) -> Vec<usize> {
    (0..groups.len()).filter(|&g| !group_intervened(groups, mask_row, g)).collect()
}

/// Highest score among unintervened groups, lowest index on ties.
pub fn argmax_free(groups: &Groups, mask_row: &[f64], scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for g in 0..groups.len() {
        if group_intervened(groups, mask_row, g) {
            continue;
        }
        if best.map_or(true, |b| scores[g] > scores[b]) {
            best = Some(g);
        }
    }
    best
}

/// Mean of `1 / (|p - 0.5| + eps)` over each group's members.
pub fn ucp_group_scores(groups: &Groups, probs: &[f64]) -> Vec<f64> {
    groups
        .all()
        .iter()
        .map(|m| m.iter().map(|&i| 1.0 / ((probs[i] - 0.5).abs() + UCP_EPSILON)).sum::<f64>() / m.len() as f64)
        .collect()
}

fn mask_intervened(groups: &Groups, mask_row: &[f64], scores: &mut [f64]) {
    for (g, s) in scores.iter_mut().enumerate() {
        if group_intervened(groups, mask_row, g) {
            *s = f64::NEG_INFINITY;
        }
    }
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Random => PolicyKind::Random,
            Policy::Ucp => PolicyKind::Ucp,
            Policy::Coop(_) => PolicyKind::Coop,
            Policy::Cva(_) => PolicyKind::Cva,
            Policy::Cvi(_) => PolicyKind::Cvi,
            Policy::Skyline => PolicyKind::Skyline,
            Policy::LearnedPsi => PolicyKind::LearnedPsi,
            Policy::BcSkyline(_) => PolicyKind::BcSkyline,
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind().name()
    }

    pub fn needs_truth(&self) -> bool {
        matches!(self, Policy::Skyline)
    }

    /// Per-group scores for every state in the batch. `rngs` supplies one
    /// stream per row and is only consumed by the random policy.
    pub fn scores(&self, model: &ConceptModel, batch: &StateBatch, rngs: &mut [RngStream]) -> Result<Vec<Vec<f64>>> {
        batch.check(model)?;
        let groups = &model.config().groups;
        let n_groups = groups.len();
        let n = batch.rows.len();
        let mut out: Vec<Vec<f64>> = match self {
            Policy::Random => {
                if rngs.len() != n {
                    return Err(Error::Policy(format!("{} rng streams for {n} states", rngs.len())));
                }
                rngs.iter_mut()
                    .map(|rng| (0..n_groups).map(|_| rng.gen::<f64>()).collect())
                    .collect()
            }
            Policy::Ucp => batch
                .rows
                .iter()
                .map(|&r| ucp_group_scores(groups, batch.state.probs_row(r)))
                .collect(),
            Policy::Coop(cfg) => coop_scores(model, batch, cfg)?,
            Policy::Cva(order) | Policy::Cvi(order) => {
                order.validate(n_groups)?;
                vec![order.scores(); n]
            }
            Policy::Skyline => skyline_scores(model, batch)?,
            Policy::LearnedPsi => {
                let lp = model.policy_scores(batch.state, batch.rows, batch.masks, batch.experts)?;
                lp.chunks(n_groups).map(<[f64]>::to_vec).collect()
            }
            Policy::BcSkyline(bc) => {
                let lp = bc.log_probs(model, batch)?;
                lp.chunks(n_groups).map(<[f64]>::to_vec).collect()
            }
        };
        for (r, s) in out.iter_mut().enumerate() {
            mask_intervened(groups, batch.mask_row(r), s);
        }
        Ok(out)
    }

    /// Next group for every state in the batch.
    pub fn next_groups(&self, model: &ConceptModel, batch: &StateBatch, rngs: &mut [RngStream]) -> Result<Vec<usize>> {
        let scores = self.scores(model, batch, rngs)?;
        let groups = &model.config().groups;
        scores
            .iter()
            .enumerate()
            .map(|(r, s)| {
                argmax_free(groups, batch.mask_row(r), s)
                    .ok_or_else(|| Error::Policy("every group is already intervened".into()))
            })
            .collect()
    }

    /// Single-state convenience wrapper around [`Policy::next_groups`].
    pub fn next_group(&self, model: &ConceptModel, batch: &StateBatch, rng: &mut RngStream) -> Result<usize> {
        if batch.rows.len() != 1 {
            return Err(Error::Policy("next_group expects exactly one state".into()));
        }
        let mut rngs = [rng.clone()];
        let g = self.next_groups(model, batch, &mut rngs)?[0];
        *rng = rngs[0].clone();
        Ok(g)
    }
}

/// Rows of candidate states: for each `(base_row, group, values)` the mask
/// gains `group` and its members take `values`.
struct Candidates {
    rows: Vec<usize>,
    masks: Vec<f64>,
    experts: Vec<f64>,
}

impl Candidates {
    fn new() -> Self {
        Self {
            rows: Vec::new(),
            masks: Vec::new(),
            experts: Vec::new(),
        }
    }

    fn push(&mut self, state_row: usize, mask: &[f64], expert: &[f64], set: &[(usize, f64)]) {
        self.rows.push(state_row);
        let start = self.masks.len();
        self.masks.extend_from_slice(mask);
        self.experts.extend_from_slice(expert);
        for &(i, v) in set {
            self.masks[start + i] = 1.0;
            self.experts[start + i] = v;
        }
    }
}

/// Ground-truth-class probability after intervening on each free group,
/// all candidates of the batch evaluated in one pass.
fn skyline_scores(model: &ConceptModel, batch: &StateBatch) -> Result<Vec<Vec<f64>>> {
    let (truth, labels) = batch
        .truth
        .ok_or_else(|| Error::Policy("Skyline needs ground-truth concepts and labels".into()))?;
    let groups = &model.config().groups;
    let k = batch.k();
    let n_out = model.config().n_outputs();
    let mut cand = Candidates::new();
    let mut owner = Vec::new();
    for (r, &row) in batch.rows.iter().enumerate() {
        let c = &truth[r * k..(r + 1) * k];
        for g in free_groups(groups, batch.mask_row(r)) {
            let set: Vec<(usize, f64)> = groups.members(g).iter().map(|&i| (i, c[i])).collect();
            cand.push(row, batch.mask_row(r), batch.expert_row(r), &set);
            owner.push((r, g));
        }
    }
    let mut out = vec![vec![f64::NEG_INFINITY; groups.len()]; batch.rows.len()];
    if cand.rows.is_empty() {
        return Ok(out);
    }
    let probs = model.class_probs(batch.state, &cand.rows, &cand.masks, &cand.experts)?;
    for (j, &(r, g)) in owner.iter().enumerate() {
        out[r][g] = probs[j * n_out + labels[r]];
    }
    Ok(out)
}

/// Skyline choice for one state by evaluating each free group separately.
pub fn skyline_exhaustive(
    model: &ConceptModel,
    state: &ConceptState,
    row: usize,
    mask: &[f64],
    expert: &[f64],
    truth: &[f64],
    label: usize,
) -> Result<usize> {
    let groups = &model.config().groups;
    let mut best: Option<(usize, f64)> = None;
    for g in 0..groups.len() {
        if group_intervened(groups, mask, g) {
            continue;
        }
        let mut m = mask.to_vec();
        let mut e = expert.to_vec();
        for &i in groups.members(g) {
            m[i] = 1.0;
            e[i] = truth[i];
        }
        let p = model.class_probs(state, &[row], &m, &e)?[label];
        if best.map_or(true, |(_, bp)| p > bp) {
            best = Some((g, p));
        }
    }
    best.map(|(g, _)| g)
        .ok_or_else(|| Error::Policy("every group is already intervened".into()))
}

/// Joint concept assignments of a group with their probabilities under
/// independent Bernoulli concept predictions.
pub fn joint_outcomes(probs: &[f64]) -> Vec<(Vec<f64>, f64)> {
    let s = probs.len();
    (0..1usize << s)
        .map(|bits| {
            let values: Vec<f64> = (0..s).map(|j| ((bits >> j) & 1) as f64).collect();
            let w = values
                .iter()
                .zip(probs)
                .map(|(&v, &p)| if v == 1.0 { p } else { 1.0 - p })
                .product();
            (values, w)
        })
        .collect()
}

fn coop_scores(model: &ConceptModel, batch: &StateBatch, cfg: &CoopConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let groups = &model.config().groups;
    let n_out = model.config().n_outputs();
    let mut out = Vec::with_capacity(batch.rows.len());
    for (r, &row) in batch.rows.iter().enumerate() {
        let probs = batch.state.probs_row(row);
        let ucp = ucp_group_scores(groups, probs);
        let (mask, expert) = (batch.mask_row(r), batch.expert_row(r));
        let free = free_groups(groups, mask);
        let mut change = vec![0.0; groups.len()];
        if cfg.beta > 0.0 && !free.is_empty() {
            let current = model.class_probs(batch.state, &[row], mask, expert)?;
            let y_hat = argmax(&current);
            let p_now = current[y_hat];
            let mut cand = Candidates::new();
            // (group, weight, divisor) per candidate row
            let mut meta = Vec::new();
            for &g in &free {
                let members = groups.members(g);
                if members.len() <= COOP_MAX_JOINT {
                    let mp: Vec<f64> = members.iter().map(|&i| probs[i]).collect();
                    for (values, w) in joint_outcomes(&mp) {
                        let set: Vec<(usize, f64)> = members.iter().copied().zip(values).collect();
                        cand.push(row, mask, expert, &set);
                        meta.push((g, w, 1.0));
                    }
                } else {
                    for &i in members {
                        for v in [0.0, 1.0] {
                            let w = if v == 1.0 { probs[i] } else { 1.0 - probs[i] };
                            cand.push(row, mask, expert, &[(i, v)]);
                            meta.push((g, w, members.len() as f64));
                        }
                    }
                }
            }
            let after = model.class_probs(batch.state, &cand.rows, &cand.masks, &cand.experts)?;
            for (j, &(g, w, div)) in meta.iter().enumerate() {
                change[g] += w * (after[j * n_out + y_hat] - p_now).abs() / div;
            }
        }
        out.push((0..groups.len()).map(|g| cfg.alpha * ucp[g] + cfg.beta * change[g]).collect());
    }
    Ok(out)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Groups ordered by descending mean validation misclassification rate of
/// their concepts (threshold 0.5).
pub fn static_order_cva(model: &ConceptModel, val: &Split) -> Result<StaticOrder> {
    if val.is_empty() {
        return Err(Error::Policy("empty validation set".into()));
    }
    let state = model.encode(&val.x, val.len())?;
    let k = val.n_concepts();
    let mut err = vec![0.0; k];
    for r in 0..val.len() {
        for (i, e) in err.iter_mut().enumerate() {
            let pred = if state.probs[r * k + i] >= 0.5 { 1.0 } else { 0.0 };
            if pred != val.c[r * k + i] {
                *e += 1.0;
            }
        }
    }
    let groups = &model.config().groups;
    let scores: Vec<f64> = groups
        .all()
        .iter()
        .map(|m| m.iter().map(|&i| err[i]).sum::<f64>() / (m.len() * val.len()) as f64)
        .collect();
    Ok(StaticOrder::from_scores(&scores))
}

/// Groups ordered by descending validation accuracy gain from intervening on
/// that group alone.
pub fn static_order_cvi(model: &ConceptModel, val: &Split) -> Result<StaticOrder> {
    if val.is_empty() {
        return Err(Error::Policy("empty validation set".into()));
    }
    let state = model.encode(&val.x, val.len())?;
    let k = val.n_concepts();
    let n = val.len();
    let rows: Vec<usize> = (0..n).collect();
    let base_masks = vec![0.0; n * k];
    let base_experts = vec![0.5; n * k];
    let n_out = model.config().n_outputs();
    let acc = |probs: &[f64]| eval::accuracy(probs, n_out, &val.y);
    let base = acc(&model.class_probs(&state, &rows, &base_masks, &base_experts)?);
    let groups = &model.config().groups;
    let mut scores = Vec::with_capacity(groups.len());
    for g in 0..groups.len() {
        let mut m = base_masks.clone();
        let mut e = base_experts.clone();
        for r in 0..n {
            for &i in groups.members(g) {
                m[r * k + i] = 1.0;
                e[r * k + i] = val.c[r * k + i];
            }
        }
        scores.push(acc(&model.class_probs(&state, &rows, &m, &e)?) - base);
    }
    Ok(StaticOrder::from_scores(&scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoopGridEntry {
    pub alpha: f64,
    pub beta: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoopGridResult {
    pub best: CoopConfig,
    pub entries: Vec<CoopGridEntry>,
}

/// Number of groups intervened at each grid budget.
pub fn coop_budget_counts(n_groups: usize) -> Vec<usize> {
    COOP_BUDGETS
        .iter()
        .map(|f| ((f * n_groups as f64).ceil() as usize).clamp(1, n_groups))
        .collect()
}

/// Scores every `(α, β)` pair of the grid by the trapezoidal area of
/// validation accuracy over the budget fractions, normalized by their span.
/// Only a strictly better pair replaces the incumbent, so ties keep the
/// lexicographically smallest pair.
pub fn grid_search_coop(model: &ConceptModel, val: &Split, seed: u64) -> Result<CoopGridResult> {
    if val.is_empty() {
        return Err(Error::Policy("empty validation set".into()));
    }
    let g = model.config().n_groups();
    let counts = coop_budget_counts(g);
    let max = *counts.iter().max().expect("nonempty budgets");
    let mut entries = Vec::new();
    let mut best: Option<(CoopConfig, f64)> = None;
    for &alpha in &COOP_GRID {
        for &beta in &COOP_GRID {
            let cfg = CoopConfig::new(alpha, beta)?;
            let opts = CurveOptions {
                max_groups: Some(max),
                ..CurveOptions::default()
            };
            let curve = eval::run_curve(model, val, &Policy::Coop(cfg), seed, &opts)?;
            let ys: Vec<f64> = counts.iter().map(|&c| curve.points[c].1).collect();
            let score = trapezoid(&COOP_BUDGETS, &ys);
            entries.push(CoopGridEntry { alpha, beta, score });
            if best.map_or(true, |(_, s)| score > s) {
                best = Some((cfg, score));
            }
        }
    }
    Ok(CoopGridResult {
        best: best.expect("grid is nonempty").0,
        entries,
    })
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    let span = xs[xs.len() - 1] - xs[0];
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
        .sum();
    area / span
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub demonstrations: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            demonstrations: 5000,
            hidden: vec![256, 128],
            epochs: 100,
            learning_rate: 0.01,
            batch_size: 256,
            momentum: 0.9,
            weight_decay: 4e-5,
        }
    }
}

/// Imitation data: policy inputs (`bottleneck ++ mask`) and Skyline targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstrations {
    pub samples: Vec<usize>,
    pub masks: Vec<f64>,
    pub experts: Vec<f64>,
    pub inputs: Vec<f64>,
    pub targets: Vec<usize>,
    pub input_width: usize,
}

impl Demonstrations {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Draws `n` states: a random training sample with `l ~ Unif{0..G-1}`
/// random groups intervened with ground truth, labelled by Skyline.
pub fn make_demonstrations(model: &ConceptModel, split: &Split, n: usize, rng: &mut RngStream) -> Result<Demonstrations> {
    if split.is_empty() {
        return Err(Error::Policy("no training samples for demonstrations".into()));
    }
    let groups = model.config().groups.clone();
    let k = groups.n_concepts();
    let g = groups.len();
    let mut samples = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n * k);
    let mut experts = Vec::with_capacity(n * k);
    for _ in 0..n {
        let s = rng.gen_range(0..split.len());
        let l = rng.gen_range(0..g);
        let mut order: Vec<usize> = (0..g).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        let mut m = vec![0.0; k];
        let mut e = vec![0.5; k];
        for &grp in &order[..l] {
            for &i in groups.members(grp) {
                m[i] = 1.0;
                e[i] = split.c_row(s)[i];
            }
        }
        samples.push(s);
        masks.extend(m);
        experts.extend(e);
    }
    let mut uniq = samples.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let sub = split.subset(&uniq);
    let state = model.encode(&sub.x, sub.len())?;
    let rows: Vec<usize> = samples.iter().map(|s| uniq.binary_search(s).expect("present")).collect();
    let truth: Vec<f64> = rows.iter().flat_map(|&r| sub.c_row(r).iter().copied()).collect();
    let labels: Vec<usize> = rows.iter().map(|&r| sub.y[r]).collect();
    let batch = StateBatch {
        state: &state,
        rows: &rows,
        masks: &masks,
        experts: &experts,
        truth: Some((&truth, &labels)),
    };
    let targets = Policy::Skyline.next_groups(model, &batch, &mut [])?;
    let bottleneck = model.bottleneck_values(&state, &rows, &masks, &experts)?;
    let bw = model.config().bottleneck_width();
    let inputs = policy_inputs(&bottleneck, &masks, bw, k);
    Ok(Demonstrations {
        samples,
        masks,
        experts,
        inputs,
        targets,
        input_width: bw + k,
    })
}

fn policy_inputs(bottleneck: &[f64], masks: &[f64], bw: usize, k: usize) -> Vec<f64> {
    bottleneck
        .chunks(bw)
        .zip(masks.chunks(k))
        .flat_map(|(b, m)| b.iter().chain(m).copied())
        .collect()
}

impl BcPolicy {
    fn log_probs(&self, model: &ConceptModel, batch: &StateBatch) -> Result<Vec<f64>> {
        let bw = model.config().bottleneck_width();
        let k = model.config().n_concepts;
        let b = model.bottleneck_values(batch.state, batch.rows, batch.masks, batch.experts)?;
        let inputs = policy_inputs(&b, batch.masks, bw, k);
        self.forward(&inputs, batch.rows.len())
    }

    fn forward(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let bound = self.net.bind(&mut tape)?;
        let x = tape.constant(vec![n, self.net.input_width()], inputs.to_vec())?;
        let lp = self.net.log_probs(&mut tape, &bound, x)?;
        Ok(tape.value(lp).to_vec())
    }

    /// Fraction of demonstrations whose free-group argmax matches the target.
    pub fn agreement(&self, model: &ConceptModel, demos: &Demonstrations) -> Result<f64> {
        let groups = &model.config().groups;
        let g = groups.len();
        let k = groups.n_concepts();
        let lp = self.forward(&demos.inputs, demos.len())?;
        let hits = (0..demos.len())
            .filter(|&r| argmax_free(groups, &demos.masks[r * k..(r + 1) * k], &lp[r * g..(r + 1) * g]) == Some(demos.targets[r]))
            .count();
        Ok(hits as f64 / demos.len().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcReport {
    pub demonstrations: usize,
    pub epoch_losses: Vec<f64>,
    pub train_agreement: f64,
}

/// Trains a BC-Skyline policy on demonstrations drawn from `split`.
pub fn bc_train(model: &ConceptModel, split: &Split, cfg: &BcConfig, rng: &mut RngStream) -> Result<(BcPolicy, BcReport)> {
    let demos = make_demonstrations(model, split, cfg.demonstrations, &mut rng.split_named("demos"))?;
    let policy = bc_fit(model, &demos, cfg, rng)?;
    let report = BcReport {
        demonstrations: demos.len(),
        epoch_losses: policy.1,
        train_agreement: policy.0.agreement(model, &demos)?,
    };
    Ok((policy.0, report))
}

fn bc_fit(model: &ConceptModel, demos: &Demonstrations, cfg: &BcConfig, rng: &mut RngStream) -> Result<(BcPolicy, Vec<f64>)> {
    if cfg.batch_size == 0 {
        return Err(config_err("batch size must be positive"));
    }
    let g = model.config().n_groups();
    let mut net = MlpNet::new(demos.input_width, &cfg.hidden, g, &mut rng.split_named("init"));
    let mut opt = Sgd::new(
        SgdConfig {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
        net.params(),
    )?;
    let mut shuffle = rng.split_named("shuffle");
    let w = demos.input_width;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..demos.len()).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut shuffle);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape)?;
            let xs: Vec<f64> = chunk.iter().flat_map(|&i| demos.inputs[i * w..(i + 1) * w].iter().copied()).collect();
            let x = tape.constant(vec![chunk.len(), w], xs)?;
            let lp = net.log_probs(&mut tape, &bound, x)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| demos.targets[i]).collect();
            let loss = tape.cross_entropy(lp, &targets)?;
            total += tape.scalar(loss) * chunk.len() as f64;
            tape.backward_into(loss, net.params_mut())?;
            opt.step(net.params_mut())?;
        }
        losses.push(total / demos.len().max(1) as f64);
    }
    Ok((BcPolicy { net }, losses))
}
