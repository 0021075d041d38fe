//! Quick invariant checks behind `conceptlab verify`.

use conceptlab_core::data::Split;
use conceptlab_core::groups::Groups;
use conceptlab_core::intervention::{intervene, mask_gradient};
use conceptlab_core::model::{BackboneOutput, ConceptModel, ModelConfig, Variant};
use conceptlab_core::policy::{free_groups, skyline_exhaustive, CoopConfig, Policy, StateBatch};
use conceptlab_core::train::{loss_pred_value, Phase, TrainConfig, Trainer};
use conceptlab_tensor::{gumbel_softmax, RngStream, Tape};
use rand::Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(u64) -> anyhow::Result<(bool, String)>;

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let checks: [(&'static str, Check); 6] = [
        ("gradients match finite differences", gradient_check),
        ("intervention operator identities", operator_check),
        ("fused skyline equals enumeration", skyline_check),
        ("coop without effect term orders like ucp", coop_check),
        ("predictive loss arithmetic", loss_check),
        ("straight-through samples are one-hot", gumbel_check),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f(seed) {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn small_model(rng: &mut RngStream, variant: Variant, groups: Groups) -> anyhow::Result<ConceptModel> {
    let cfg = ModelConfig {
        n_inputs: 4,
        n_concepts: groups.n_concepts(),
        emb_width: 3,
        n_classes: 3,
        groups,
        hidden_f: vec![5],
        hidden_psi: vec![6],
        backbone_hidden: vec![5],
        variant,
    };
    Ok(ConceptModel::new(cfg, rng)?)
}

fn random_split(model: &ConceptModel, n: usize, rng: &mut RngStream) -> anyhow::Result<Split> {
    let cfg = model.config();
    let k = cfg.n_concepts;
    let x = (0..n * cfg.n_inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c = (0..n * k).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    let y = (0..n).map(|_| rng.gen_range(0..cfg.n_classes)).collect();
    Ok(Split::new(cfg.n_inputs, cfg.n_classes, cfg.groups.clone(), x, c, y)?)
}

fn gradient_check(seed: u64) -> anyhow::Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let root = RngStream::new(seed).split_named("gradcheck");
    for net in 0..10u64 {
        let mut rng = root.split(net);
        let mut model = small_model(&mut rng, Variant::JointSigmoidCbm, Groups::singletons(3))?;
        let data = random_split(&model, 6, &mut rng)?;
        model.params_mut().zero_grads();
        let cfg = TrainConfig {
            batch_size: 6,
            concept_loss_weighting: false,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg, &data)?;
        let rows: Vec<usize> = (0..6).collect();
        t.compute_gradients(&data, &rows, Phase::Joint)?;
        let ids: Vec<_> = t.model.params().ids().collect();
        for id in ids {
            let n = t.model.params().get(id).numel();
            let grad = t.model.params().get(id).grad.clone().unwrap_or_else(|| vec![0.0; n]);
            for j in (0..n).step_by(n.div_ceil(3).max(1)) {
                let orig = t.model.params().get(id).data()[j];
                let h = 1e-5;
                t.model.params_mut().get_mut(id).data_mut()[j] = orig + h;
                let up = t.evaluate_loss(&data, Phase::Joint)?;
                t.model.params_mut().get_mut(id).data_mut()[j] = orig - h;
                let down = t.evaluate_loss(&data, Phase::Joint)?;
                t.model.params_mut().get_mut(id).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - grad[j]).abs() / (fd.abs() + grad[j].abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
    }
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn operator_check(seed: u64) -> anyhow::Result<(bool, String)> {
    let root = RngStream::new(seed).split_named("operator");
    let mut worst: f64 = 0.0;
    for n in 0..200u64 {
        let mut rng = root.split(n);
        let w = rng.gen_range(1..4);
        let pos: Vec<f64> = (0..w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let neg: Vec<f64> = (0..w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let p: f64 = rng.gen_range(0.01..0.99);
        let e = f64::from(u8::from(rng.gen_bool(0.5)));
        let mu: f64 = rng.gen_range(0.0..1.0);
        let eval = |mu: f64, e: f64, p: f64| -> anyhow::Result<Vec<f64>> {
            let mut t = Tape::no_grad();
            let bo = BackboneOutput {
                pos: t.constant(vec![1, w], pos.clone())?,
                neg: t.constant(vec![1, w], neg.clone())?,
                probs: t.constant(vec![1, 1], vec![p])?,
                logits: t.constant(vec![1, 1], vec![0.0])?,
                width: w,
                logit_bottleneck: false,
                anchored: true,
            };
            let m = t.constant(vec![1, 1], vec![mu])?;
            let ex = t.constant(vec![1, 1], vec![e])?;
            let out = intervene(&mut t, &bo, m, ex)?;
            Ok(t.value(out).to_vec())
        };
        if eval(0.0, e, p)? != eval(0.0, 1.0 - e, p)? || eval(1.0, e, p)? != eval(1.0, e, 1.0 - p)? {
            return Ok((false, format!("identity violated on instance {n}")));
        }
        let h = 1e-5;
        let (up, down) = (eval(mu + h, e, p)?, eval(mu - h, e, p)?);
        let analytic = mask_gradient(e, p, &pos, &neg);
        for j in 0..w {
            worst = worst.max(((up[j] - down[j]) / (2.0 * h) - analytic[j]).abs());
        }
    }
    Ok((worst < 1e-6, format!("max mask-gradient error {worst:.2e}")))
}

fn random_states(model: &ConceptModel, n: usize, rng: &mut RngStream) -> anyhow::Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<usize>)> {
    let groups = &model.config().groups;
    let k = groups.n_concepts();
    let mut masks = vec![0.0; n * k];
    let mut experts = vec![0.5; n * k];
    let truth: Vec<f64> = (0..n * k).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    for r in 0..n {
        let free = rng.gen_range(0..groups.len());
        for g in 0..groups.len() {
            if g != free && rng.gen_bool(0.4) {
                for &i in groups.members(g) {
                    masks[r * k + i] = 1.0;
                    experts[r * k + i] = truth[r * k + i];
                }
            }
        }
    }
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    Ok((masks, experts, truth, labels))
}

fn skyline_check(seed: u64) -> anyhow::Result<(bool, String)> {
    let root = RngStream::new(seed).split_named("skyline");
    let mut checked = 0;
    for m in 0..5u64 {
        let mut rng = root.split(m);
        let sizes: Vec<usize> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(1..3)).collect();
        let model = small_model(&mut rng, Variant::IntCem, Groups::contiguous(&sizes)?)?;
        let n = 20;
        let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let state = model.encode(&x, n)?;
        let (masks, experts, truth, labels) = random_states(&model, n, &mut rng)?;
        let rows: Vec<usize> = (0..n).collect();
        let batch = StateBatch {
            state: &state,
            rows: &rows,
            masks: &masks,
            experts: &experts,
            truth: Some((&truth, &labels)),
        };
        let fused = Policy::Skyline.next_groups(&model, &batch, &mut [])?;
        let k = model.config().n_concepts;
        for r in 0..n {
            let s = r * k..(r + 1) * k;
            let ex = skyline_exhaustive(&model, &state, r, &masks[s.clone()], &experts[s.clone()], &truth[s], labels[r])?;
            if ex != fused[r] {
                return Ok((false, format!("model {m} state {r}: fused {} vs {ex}", fused[r])));
            }
            checked += 1;
        }
    }
    Ok((true, format!("{checked} states")))
}

fn coop_check(seed: u64) -> anyhow::Result<(bool, String)> {
    let mut rng = RngStream::new(seed).split_named("coop");
    let model = small_model(&mut rng, Variant::Cem, Groups::contiguous(&[1, 2, 1, 3, 1])?)?;
    let n = 30;
    let x: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let state = model.encode(&x, n)?;
    let (masks, experts, _, _) = random_states(&model, n, &mut rng)?;
    let rows: Vec<usize> = (0..n).collect();
    let batch = StateBatch {
        state: &state,
        rows: &rows,
        masks: &masks,
        experts: &experts,
        truth: None,
    };
    let ucp = Policy::Ucp.next_groups(&model, &batch, &mut [])?;
    let coop = Policy::Coop(CoopConfig::new(3.0, 0.0)?).next_groups(&model, &batch, &mut [])?;
    let k = model.config().n_concepts;
    let valid = (0..n).all(|r| free_groups(&model.config().groups, &masks[r * k..(r + 1) * k]).contains(&ucp[r]));
    Ok((ucp == coop && valid, format!("{n} states")))
}

fn loss_check(_: u64) -> anyhow::Result<(bool, String)> {
    let v = loss_pred_value(1.0, 0.5, 1.1, 2);
    let exact = (1.0 + 1.21 * 0.5) / 2.21;
    Ok(((v - exact).abs() < 1e-9, format!("{v:.9}")))
}

fn gumbel_check(seed: u64) -> anyhow::Result<(bool, String)> {
    let mut rng = RngStream::new(seed).split_named("gumbel");
    let lp = [0.1f64, 0.2, 0.3, 0.4].map(f64::ln);
    for _ in 0..500 {
        let mut t = Tape::new();
        let v = t.variable(vec![1, 4], lp.to_vec())?;
        let s = gumbel_softmax(&mut t, v, 1.0, true, &mut rng)?;
        let vals = t.value(s);
        if vals.iter().filter(|&&x| x == 1.0).count() != 1 || vals.iter().any(|&x| x != 0.0 && x != 1.0) {
            return Ok((false, format!("sample {vals:?} is not one-hot")));
        }
    }
    Ok((true, "500 draws".into()))
}
