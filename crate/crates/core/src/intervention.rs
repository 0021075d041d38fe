//! Concept interventions: masks, expert values, the mixing operator and the
//! percentile anchors used by logit bottlenecks.

use conceptlab_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::groups::Groups;
use crate::model::BackboneOutput;

/// Per-concept intervention mask with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionMask {
    values: Vec<f64>,
}

impl InterventionMask {
    pub fn empty(k: usize) -> Self {
        Self { values: vec![0.0; k] }
    }

    pub fn full(k: usize) -> Self {
        Self { values: vec![1.0; k] }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Intervention(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    /// Mask with every concept of the listed groups set.
    pub fn from_groups(groups: &Groups, selected: &[usize]) -> Result<Self> {
        selected
            .iter()
            .try_fold(Self::empty(groups.n_concepts()), |m, &g| m.or_group(groups, g))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `μ ∨ 1_g`: sets every member of group `g`.
    pub fn or_group(&self, groups: &Groups, g: usize) -> Result<Self> {
        self.check_groups(groups)?;
        if g >= groups.len() {
            return Err(Error::Intervention(format!("group {g} out of range 0..{}", groups.len())));
        }
        let mut values = self.values.clone();
        for &i in groups.members(g) {
            values[i] = 1.0;
        }
        Ok(Self { values })
    }

    /// Adds a (possibly soft) per-concept increment and clamps into `[0, 1]`.
    pub fn accumulate(&self, delta: &[f64]) -> Result<Self> {
        if delta.len() != self.values.len() {
            return Err(Error::Intervention(format!(
                "increment of length {} for a mask of length {}",
                delta.len(),
                self.values.len()
            )));
        }
        let values = self.values.iter().zip(delta).map(|(m, d)| (m + d).clamp(0.0, 1.0)).collect();
        Ok(Self { values })
    }

    /// A group counts as intervened once all of its members are fully set.
    pub fn is_group_intervened(&self, groups: &Groups, g: usize) -> bool {
        groups.members(g).iter().all(|&i| self.values[i] >= 1.0)
    }

    pub fn free_groups(&self, groups: &Groups) -> Vec<usize> {
        (0..groups.len()).filter(|&g| !self.is_group_intervened(groups, g)).collect()
    }

    pub fn intervened_groups(&self, groups: &Groups) -> Vec<usize> {
        (0..groups.len()).filter(|&g| self.is_group_intervened(groups, g)).collect()
    }

    pub fn is_full(&self) -> bool {
        self.values.iter().all(|&v| v >= 1.0)
    }

    /// All members of every group share one value.
    pub fn is_group_consistent(&self, groups: &Groups) -> bool {
        groups.all().iter().all(|m| m.iter().all(|&i| self.values[i] == self.values[m[0]]))
    }

    fn check_groups(&self, groups: &Groups) -> Result<()> {
        if groups.n_concepts() != self.values.len() {
            return Err(Error::Intervention(format!(
                "mask has {} entries but groups cover {} concepts",
                self.values.len(),
                groups.n_concepts()
            )));
        }
        Ok(())
    }
}

/// Expert-provided concept values `c̃`: ground truth where intervened, 0.5
/// elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConcepts {
    values: Vec<f64>,
}

impl ExpertConcepts {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Copies `truth` into every entry with a nonzero mask value.
    pub fn from_truth(truth: &[f64], mask: &InterventionMask) -> Result<Self> {
        if truth.len() != mask.len() {
            return Err(Error::Intervention(format!(
                "{} ground-truth concepts for a mask of length {}",
                truth.len(),
                mask.len()
            )));
        }
        let values = truth
            .iter()
            .zip(mask.values())
            .map(|(&c, &m)| if m > 0.0 { c } else { 0.5 })
            .collect();
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn validate(&self, mask: &InterventionMask) -> Result<()> {
        validate_expert(mask.values(), &self.values)
    }
}

/// Flips every intervened ground-truth concept; unintervened entries are 0.5.
pub fn adversarial_concepts(truth: &[f64], mask: &InterventionMask) -> Result<ExpertConcepts> {
    let flipped: Vec<f64> = truth.iter().map(|c| 1.0 - c).collect();
    ExpertConcepts::from_truth(&flipped, mask)
}

fn validate_expert(mask: &[f64], expert: &[f64]) -> Result<()> {
    if mask.len() != expert.len() {
        return Err(Error::Intervention(format!(
            "mask of length {} with {} expert values",
            mask.len(),
            expert.len()
        )));
    }
    for (i, (&m, &c)) in mask.iter().zip(expert).enumerate() {
        if m == 1.0 && c != 0.0 && c != 1.0 {
            return Err(Error::Intervention(format!(
                "entry {i} is intervened but its expert value {c} is not 0 or 1"
            )));
        }
    }
    Ok(())
}

/// Per-concept `(lo, hi)` anchors for logit bottlenecks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitAnchors {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl LogitAnchors {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Intervention("anchor vectors differ in length".into()));
        }
        if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i])) {
            return Err(Error::Intervention(format!("anchor {i}: lo {} > hi {}", lo[i], hi[i])));
        }
        Ok(Self { lo, hi })
    }

    /// 5th and 95th nearest-rank percentiles of each column of a row-major
    /// `[n, k]` activation matrix.
    pub fn from_activations(activations: &[f64], k: usize) -> Result<Self> {
        if k == 0 || activations.is_empty() || activations.len() % k != 0 {
            return Err(Error::Intervention("no activations to compute anchors from".into()));
        }
        let mut lo = Vec::with_capacity(k);
        let mut hi = Vec::with_capacity(k);
        for i in 0..k {
            let mut col: Vec<f64> = activations.iter().skip(i).step_by(k).copied().collect();
            col.sort_by(f64::total_cmp);
            lo.push(nearest_rank(&col, 5.0));
            hi.push(nearest_rank(&col, 95.0));
        }
        Self::new(lo, hi)
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }
}

/// Nearest-rank percentile of an ascending, nonempty slice.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    let rank = ((pct / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

fn one_minus(tape: &mut Tape, v: Var) -> Result<Var> {
    let neg = tape.scale(v, -1.0)?;
    Ok(tape.add_scalar(neg, 1.0)?)
}

/// Convex combination `q ⊙ pos + (1 - q) ⊙ neg` with `q` of shape `[b, k]`
/// broadcast over each concept's segment.
fn mix(tape: &mut Tape, bo: &BackboneOutput, q: Var) -> Result<Var> {
    let q = if bo.width > 1 { tape.repeat_cols(q, bo.width)? } else { q };
    let a = tape.mul(q, bo.pos)?;
    let nq = one_minus(tape, q)?;
    let b = tape.mul(nq, bo.neg)?;
    Ok(tape.add(a, b)?)
}

/// Bottleneck with no interventions.
pub fn mix_bottleneck(tape: &mut Tape, bo: &BackboneOutput) -> Result<Var> {
    if bo.logit_bottleneck {
        return Ok(bo.logits);
    }
    mix(tape, bo, bo.probs)
}

/// Intervened bottleneck for masks `mu` and expert values `expert`, both
/// `[b, k]`. Embedding and sigmoid bottlenecks mix with
/// `q = μ ⊙ c̃ + (1 - μ) ⊙ p̂`; logit bottlenecks replace intervened logits
/// with the anchor selected by `c̃`.
pub fn intervene(tape: &mut Tape, bo: &BackboneOutput, mu: Var, expert: Var) -> Result<Var> {
    let k_shape = tape.shape(bo.probs).to_vec();
    for (name, v) in [("mask", mu), ("expert values", expert)] {
        if tape.shape(v) != k_shape.as_slice() {
            return Err(Error::Intervention(format!(
                "{name} shape {:?} does not match concept probabilities {:?}",
                tape.shape(v),
                k_shape
            )));
        }
    }
    validate_expert(tape.value(mu), tape.value(expert))?;
    if !bo.anchored && tape.value(mu).iter().any(|&m| m != 0.0) {
        return Err(Error::Intervention("logit bottleneck has no percentile anchors yet".into()));
    }

    let keep = one_minus(tape, mu)?;
    if bo.logit_bottleneck {
        let target = mix(tape, bo, expert)?;
        let a = tape.mul(mu, target)?;
        let b = tape.mul(keep, bo.logits)?;
        return Ok(tape.add(a, b)?);
    }
    let a = tape.mul(mu, expert)?;
    let b = tape.mul(keep, bo.probs)?;
    let q = tape.add(a, b)?;
    mix(tape, bo, q)
}

/// Closed-form derivative of segment `i` with respect to `μ_i`:
/// `(c̃_i - p̂_i)(ĉ⁺_i - ĉ⁻_i)`.
pub fn mask_gradient(expert: f64, prob: f64, pos: &[f64], neg: &[f64]) -> Vec<f64> {
    pos.iter().zip(neg).map(|(p, n)| (expert - prob) * (p - n)).collect()
}
