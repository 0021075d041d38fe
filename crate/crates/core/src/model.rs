//! Concept encoder, label predictor, intervention policy network and the
//! CBM baselines, all as forward passes over a [`Tape`].
//!
//! The encoder `g` is split in two stages: a *backbone* producing, for every
//! concept, a positive/negative embedding pair plus a probability, and the
//! *mixing* step that collapses each pair into one segment of the flat
//! bottleneck (see [`crate::intervention`]). Scalar CBMs reuse the same
//! layout with width-1 constant embeddings (`[1]`/`[0]` for sigmoid
//! bottlenecks, percentile anchors for logit bottlenecks).

use std::fmt;
use std::str::FromStr;

use conceptlab_tensor::{kaiming_uniform, ParamId, ParamSet, RngStream, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::groups::Groups;
use crate::intervention::{self, LogitAnchors};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "IntCEM")]
    IntCem,
    #[serde(rename = "CEM")]
    Cem,
    #[serde(rename = "JointSigmoidCBM")]
    JointSigmoidCbm,
    #[serde(rename = "JointLogitCBM")]
    JointLogitCbm,
    #[serde(rename = "SequentialCBM")]
    SequentialCbm,
    #[serde(rename = "IndependentCBM")]
    IndependentCbm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::IntCem,
        Variant::Cem,
        Variant::JointSigmoidCbm,
        Variant::JointLogitCbm,
        Variant::SequentialCbm,
        Variant::IndependentCbm,
    ];

    /// Embedding models (CEM family) as opposed to scalar CBMs.
    pub fn is_embedding(self) -> bool {
        matches!(self, Variant::IntCem | Variant::Cem)
    }

    pub fn has_policy(self) -> bool {
        self == Variant::IntCem
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::IntCem => "IntCEM",
            Variant::Cem => "CEM",
            Variant::JointSigmoidCbm => "JointSigmoidCBM",
            Variant::JointLogitCbm => "JointLogitCBM",
            Variant::SequentialCbm => "SequentialCBM",
            Variant::IndependentCbm => "IndependentCBM",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| config_err(format!("unknown variant {s:?}")))
    }
}

fn default_emb_width() -> usize {
    16
}

fn default_hidden_psi() -> Vec<usize> {
    vec![128, 128, 64, 64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_inputs: usize,
    pub n_concepts: usize,
    #[serde(default = "default_emb_width")]
    pub emb_width: usize,
    pub n_classes: usize,
    pub groups: Groups,
    #[serde(default)]
    pub hidden_f: Vec<usize>,
    #[serde(default = "default_hidden_psi")]
    pub hidden_psi: Vec<usize>,
    #[serde(default)]
    pub backbone_hidden: Vec<usize>,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_inputs == 0 {
            return Err(config_err("n_inputs must be positive"));
        }
        if self.n_concepts == 0 {
            return Err(config_err("n_concepts must be positive"));
        }
        if self.groups.n_concepts() != self.n_concepts {
            return Err(config_err(format!(
                "groups cover {} concepts but n_concepts is {}",
                self.groups.n_concepts(),
                self.n_concepts
            )));
        }
        if self.emb_width == 0 {
            return Err(config_err("emb_width must be at least 1"));
        }
        if self.n_classes == 0 {
            return Err(config_err("n_classes must be positive"));
        }
        let widths = self.hidden_f.iter().chain(&self.backbone_hidden);
        let psi = self.variant.has_policy().then_some(&self.hidden_psi).into_iter().flatten();
        if widths.chain(psi).any(|&w| w == 0) {
            return Err(config_err("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// Per-concept segment width of the bottleneck.
    pub fn segment_width(&self) -> usize {
        if self.variant.is_embedding() {
            self.emb_width
        } else {
            1
        }
    }

    /// Input dimension of the label predictor: `k * m` or `k`.
    pub fn bottleneck_width(&self) -> usize {
        self.n_concepts * self.segment_width()
    }

    /// Width of the class distribution. A single-output (`n_classes = 1`)
    /// head is presented as a two-class distribution `[1 - p, p]`.
    pub fn n_outputs(&self) -> usize {
        self.n_classes.max(2)
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let w = params.add(format!("{name}.w"), kaiming_uniform(fan_in, fan_out, rng));
        let b = params.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        Self { w, b }
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bound.get(self.w))?;
        Ok(tape.add_row(h, bound.get(self.b))?)
    }
}

/// Leaky-ReLU MLP; the activation follows every layer except the last
/// unless `activate_last` is set.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Linear>,
    activate_last: bool,
}

impl Mlp {
    fn new(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        widths: &[usize],
        activate_last: bool,
        rng: &mut RngStream,
    ) -> Self {
        let mut fan_in = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(params, &format!("{name}.{i}"), fan_in, w, rng);
                fan_in = w;
                l
            })
            .collect();
        Self { layers, activate_last }
    }

    fn forward(&self, tape: &mut Tape, bound: &BoundParams, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, bound, x)?;
            if i + 1 < n || self.activate_last {
                x = tape.leaky_relu(x)?;
            }
        }
        Ok(x)
    }
}

/// Standalone leaky-ReLU MLP with its own parameters, used for the
/// behavioural-cloning policy.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    params: ParamSet,
    mlp: Mlp,
    input: usize,
    widths: Vec<usize>,
}

impl MlpNet {
    pub fn new(input: usize, hidden: &[usize], output: usize, rng: &mut RngStream) -> Self {
        let mut params = ParamSet::new();
        let mut widths = hidden.to_vec();
        widths.push(output);
        let mlp = Mlp::new(&mut params, "net", input, &widths, false, rng);
        Self {
            params,
            mlp,
            input,
            widths,
        }
    }

    pub fn input_width(&self) -> usize {
        self.input
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        BoundParams::bind(&self.params, tape)
    }

    /// Row-wise log-softmax of the network output.
    pub fn log_probs(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let o = self.mlp.forward(tape, bound, x)?;
        Ok(tape.log_softmax(o)?)
    }
}

/// Every parameter of a model copied onto one tape.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn bind(params: &ParamSet, tape: &mut Tape) -> Result<Self> {
        Ok(Self(params.ids().map(|id| tape.param(params, id)).collect::<std::result::Result<_, _>>()?))
    }

    fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Backbone output on a tape.
///
/// `pos`/`neg` are `[b, k * w]` with concept `i` occupying columns
/// `i*w..(i+1)*w`; `probs` and `logits` are `[b, k]`.
#[derive(Debug, Clone, Copy)]
pub struct BackboneOutput {
    pub pos: Var,
    pub neg: Var,
    pub probs: Var,
    pub logits: Var,
    pub width: usize,
    /// Unintervened segments carry the raw logit rather than a mixture.
    pub logit_bottleneck: bool,
    /// False for a logit bottleneck whose percentile anchors are not known
    /// yet; such outputs can only be used unintervened.
    pub anchored: bool,
}

/// Detached backbone values for a batch of inputs, reusable across many
/// intervention masks.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptState {
    pub n: usize,
    pub k: usize,
    pub width: usize,
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub logit_bottleneck: bool,
    pub anchored: bool,
}

impl ConceptState {
    /// Detached copy of a backbone evaluated on `tape`.
    pub fn from_backbone(tape: &Tape, bo: &BackboneOutput) -> Self {
        let s = tape.shape(bo.probs);
        Self {
            n: s[0],
            k: s[1],
            width: bo.width,
            pos: tape.value(bo.pos).to_vec(),
            neg: tape.value(bo.neg).to_vec(),
            probs: tape.value(bo.probs).to_vec(),
            logits: tape.value(bo.logits).to_vec(),
            logit_bottleneck: bo.logit_bottleneck,
            anchored: bo.anchored,
        }
    }

    pub fn probs_row(&self, r: usize) -> &[f64] {
        &self.probs[r * self.k..(r + 1) * self.k]
    }

    pub fn logits_row(&self, r: usize) -> &[f64] {
        &self.logits[r * self.k..(r + 1) * self.k]
    }

    /// Places the selected rows (repeats allowed) on `tape` as constants.
    pub fn backbone_on(&self, tape: &mut Tape, rows: &[usize]) -> Result<BackboneOutput> {
        let kw = self.k * self.width;
        let gather = |src: &[f64], w: usize| -> Vec<f64> {
            rows.iter().flat_map(|&r| src[r * w..(r + 1) * w].iter().copied()).collect()
        };
        let b = rows.len();
        Ok(BackboneOutput {
            pos: tape.constant(vec![b, kw], gather(&self.pos, kw))?,
            neg: tape.constant(vec![b, kw], gather(&self.neg, kw))?,
            probs: tape.constant(vec![b, self.k], gather(&self.probs, self.k))?,
            logits: tape.constant(vec![b, self.k], gather(&self.logits, self.k))?,
            width: self.width,
            logit_bottleneck: self.logit_bottleneck,
            anchored: self.anchored,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    config: ModelConfig,
    params: ParamSet,
    trunk: Mlp,
    embed: Option<Linear>,
    scorer: Option<Linear>,
    concept_head: Option<Linear>,
    label: Mlp,
    psi: Option<Mlp>,
    anchors: Option<LogitAnchors>,
}

impl ConceptModel {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let k = config.n_concepts;
        let trunk = Mlp::new(&mut params, "trunk", config.n_inputs, &config.backbone_hidden, true, rng);
        let trunk_out = config.backbone_hidden.last().copied().unwrap_or(config.n_inputs);

        let (embed, scorer, concept_head) = if config.variant.is_embedding() {
            let m = config.emb_width;
            let embed = Linear::new(&mut params, "embed", trunk_out, 2 * k * m, rng);
            let scorer = Linear::new(&mut params, "scorer", 2 * m, 1, rng);
            (Some(embed), Some(scorer), None)
        } else {
            (None, None, Some(Linear::new(&mut params, "concepts", trunk_out, k, rng)))
        };

        let mut label_widths = config.hidden_f.clone();
        label_widths.push(if config.n_classes == 1 { 1 } else { config.n_classes });
        let label = Mlp::new(&mut params, "label", config.bottleneck_width(), &label_widths, false, rng);

        let psi = config.variant.has_policy().then(|| {
            let mut widths = config.hidden_psi.clone();
            widths.push(config.n_groups());
            Mlp::new(&mut params, "psi", config.bottleneck_width() + k, &widths, false, rng)
        });

        Ok(Self {
            config,
            params,
            trunk,
            embed,
            scorer,
            concept_head,
            label,
            psi,
            anchors: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn anchors(&self) -> Option<&LogitAnchors> {
        self.anchors.as_ref()
    }

    pub fn set_anchors(&mut self, anchors: LogitAnchors) -> Result<()> {
        if anchors.len() != self.config.n_concepts {
            return Err(config_err(format!(
                "{} anchors for {} concepts",
                anchors.len(),
                self.config.n_concepts
            )));
        }
        self.anchors = Some(anchors);
        Ok(())
    }

    /// Sets the logit-bottleneck anchors to the 5th/95th percentiles of the
    /// pre-sigmoid concept activations over `n` input rows.
    pub fn fit_logit_anchors(&mut self, x: &[f64], n: usize) -> Result<()> {
        if self.config.variant != Variant::JointLogitCbm {
            return Err(config_err("only logit CBMs use percentile anchors"));
        }
        if n == 0 {
            return Err(Error::Data("no samples to compute anchors from".into()));
        }
        let state = self.encode(x, n)?;
        let anchors = LogitAnchors::from_activations(&state.logits, self.config.n_concepts)?;
        self.set_anchors(anchors)
    }

    /// Whether `id` belongs to the policy network.
    pub fn is_policy_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("psi.")
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        BoundParams::bind(&self.params, tape)
    }

    fn trunk_forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.config.n_inputs {
            return Err(Error::Data(format!(
                "input shape {s:?} does not match n_inputs {}",
                self.config.n_inputs
            )));
        }
        self.trunk.forward(tape, bound, x)
    }

    /// Pre-sigmoid concept scores `[b, k]` (CBM variants only).
    pub fn concept_logits(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let head = self
            .concept_head
            .as_ref()
            .ok_or_else(|| config_err(format!("{} has no scalar concept head", self.config.variant)))?;
        let h = self.trunk_forward(tape, bound, x)?;
        head.forward(tape, bound, h)
    }

    /// Runs the backbone on `x` of shape `[b, n]`.
    pub fn backbone(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<BackboneOutput> {
        let k = self.config.n_concepts;
        let b = tape.shape(x)[0];
        if let (Some(embed), Some(scorer)) = (&self.embed, &self.scorer) {
            let m = self.config.emb_width;
            let h = self.trunk_forward(tape, bound, x)?;
            let e = embed.forward(tape, bound, h)?;
            let e = tape.leaky_relu(e)?;
            let pos = tape.slice(e, 0, k * m)?;
            let neg = tape.slice(e, k * m, 2 * k * m)?;
            let pos_rows = tape.reshape(pos, vec![b * k, m])?;
            let neg_rows = tape.reshape(neg, vec![b * k, m])?;
            let pair = tape.concat(&[pos_rows, neg_rows])?;
            let score = scorer.forward(tape, bound, pair)?;
            let logits = tape.reshape(score, vec![b, k])?;
            let probs = tape.sigmoid(logits)?;
            return Ok(BackboneOutput {
                pos,
                neg,
                probs,
                logits,
                width: m,
                logit_bottleneck: false,
                anchored: true,
            });
        }
        let logits = self.concept_logits(tape, bound, x)?;
        let probs = tape.sigmoid(logits)?;
        let (hi, lo, logit_bottleneck, anchored) = match (self.config.variant, &self.anchors) {
            (Variant::JointLogitCbm, Some(a)) => (a.hi.clone(), a.lo.clone(), true, true),
            (Variant::JointLogitCbm, None) => (vec![0.0; k], vec![0.0; k], true, false),
            _ => (vec![1.0; k], vec![0.0; k], false, true),
        };
        let tile = |v: &[f64]| (0..b).flat_map(|_| v.iter().copied()).collect::<Vec<_>>();
        Ok(BackboneOutput {
            pos: tape.constant(vec![b, k], tile(&hi))?,
            neg: tape.constant(vec![b, k], tile(&lo))?,
            probs,
            logits,
            width: 1,
            logit_bottleneck,
            anchored,
        })
    }

    /// Log class distribution from a bottleneck of width
    /// [`ModelConfig::bottleneck_width`].
    pub fn label_log_probs(&self, tape: &mut Tape, bound: &BoundParams, bottleneck: Var) -> Result<Var> {
        let s = tape.shape(bottleneck);
        if s.len() != 2 || s[1] != self.config.bottleneck_width() {
            return Err(Error::Data(format!(
                "bottleneck shape {s:?}, label predictor expects width {}",
                self.config.bottleneck_width()
            )));
        }
        let out = self.label.forward(tape, bound, bottleneck)?;
        let out = if self.config.n_classes == 1 {
            let b = tape.shape(out)[0];
            let zero = tape.constant(vec![b, 1], vec![0.0; b])?;
            tape.concat(&[zero, out])?
        } else {
            out
        };
        Ok(tape.log_softmax(out)?)
    }

    /// Log-probabilities over concept groups given a bottleneck and the mask
    /// of already intervened concepts.
    pub fn policy_log_probs(&self, tape: &mut Tape, bound: &BoundParams, bottleneck: Var, mask: Var) -> Result<Var> {
        let psi = self
            .psi
            .as_ref()
            .ok_or_else(|| config_err(format!("{} has no intervention policy", self.config.variant)))?;
        let input = tape.concat(&[bottleneck, mask])?;
        let out = psi.forward(tape, bound, input)?;
        Ok(tape.log_softmax(out)?)
    }

    /// Detached backbone values for `n` rows of flat row-major inputs.
    pub fn encode(&self, x: &[f64], n: usize) -> Result<ConceptState> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape)?;
        let xv = tape.constant(vec![n, self.config.n_inputs], x.to_vec())?;
        let bo = self.backbone(&mut tape, &bound, xv)?;
        Ok(ConceptState::from_backbone(&tape, &bo))
    }

    /// Intervened bottlenecks for selected rows of `state`. `masks` and
    /// `experts` are flat `[rows.len(), k]`.
    pub fn bottleneck_values(
        &self,
        state: &ConceptState,
        rows: &[usize],
        masks: &[f64],
        experts: &[f64],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let c = self.bottleneck_on(&mut tape, state, rows, masks, experts)?;
        Ok(tape.value(c).to_vec())
    }

    fn bottleneck_on(
        &self,
        tape: &mut Tape,
        state: &ConceptState,
        rows: &[usize],
        masks: &[f64],
        experts: &[f64],
    ) -> Result<Var> {
        let k = self.config.n_concepts;
        let bo = state.backbone_on(tape, rows)?;
        let mu = tape.constant(vec![rows.len(), k], masks.to_vec())?;
        let ct = tape.constant(vec![rows.len(), k], experts.to_vec())?;
        intervention::intervene(tape, &bo, mu, ct)
    }

    /// Class distributions after intervening, flat `[rows.len(), n_outputs]`.
    pub fn class_probs(&self, state: &ConceptState, rows: &[usize], masks: &[f64], experts: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape)?;
        let c = self.bottleneck_on(&mut tape, state, rows, masks, experts)?;
        let lp = self.label_log_probs(&mut tape, &bound, c)?;
        Ok(tape.value(lp).iter().map(|v| v.exp()).collect())
    }

    /// Policy log-probabilities over groups, flat `[rows.len(), groups]`.
    pub fn policy_scores(&self, state: &ConceptState, rows: &[usize], masks: &[f64], experts: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad();
        let bound = self.bind(&mut tape)?;
        let c = self.bottleneck_on(&mut tape, state, rows, masks, experts)?;
        let mu = tape.constant(vec![rows.len(), self.config.n_concepts], masks.to_vec())?;
        let lp = self.policy_log_probs(&mut tape, &bound, c, mu)?;
        Ok(tape.value(lp).to_vec())
    }

    /// Unintervened concept probabilities and class distributions for `n`
    /// flat input rows.
    pub fn predict(&self, x: &[f64], n: usize) -> Result<(ConceptState, Vec<f64>)> {
        let state = self.encode(x, n)?;
        let k = self.config.n_concepts;
        let rows: Vec<usize> = (0..n).collect();
        let zeros = vec![0.0; n * k];
        let experts = vec![0.5; n * k];
        let probs = self.class_probs(&state, &rows, &zeros, &experts)?;
        Ok((state, probs))
    }
}
