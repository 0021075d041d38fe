//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use axum::body::Body;
use axum::http::{Method, Request};
use conceptlab::checkpoint::Checkpoint;
use conceptlab::experiment::{build_policy, train_run, Prepared, RunConfig};
use conceptlab::service::{router, AppState, ServiceConfig};
use conceptlab_core::data::{operand_values, MnistAddSpec, Split};
use conceptlab_core::eval::{auic, curve_at, run_curve, CurveOptions, InterventionCurve};
use conceptlab_core::groups::Groups;
use conceptlab_core::intervention::{intervene, mask_gradient};
use conceptlab_core::model::{BackboneOutput, ConceptModel, ModelConfig, Variant};
use conceptlab_core::policy::{skyline_exhaustive, BcConfig, CoopConfig, Policy, PolicyKind, StateBatch};
use conceptlab_core::train::{loss_pred_value, Phase, TrainConfig, Trainer};
use conceptlab_tensor::{gumbel_softmax, RngStream, Tape, Var};
use http_body_util::BodyExt;
use rand::Rng;
use serde_json::Value;
use tower::ServiceExt;

const SEEDS: u64 = 5;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome {
        passed,
        detail: detail.into(),
    })
}

fn rand_vec(rng: &mut RngStream, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

// ---------------------------------------------------------------- autodiff

fn random_network(t: &mut Tape, v: &[Var], acts: &[u8], targets: &[usize]) -> Var {
    let mut h = v[0];
    for (l, act) in acts.iter().enumerate() {
        h = t.matmul(h, v[1 + 2 * l]).unwrap();
        h = t.add_row(h, v[2 + 2 * l]).unwrap();
        if l + 1 < acts.len() {
            h = match act {
                0 => t.leaky_relu(h).unwrap(),
                1 => t.sigmoid(h).unwrap(),
                _ => t.softmax(h).unwrap(),
            };
        }
    }
    let lp = t.log_softmax(h).unwrap();
    t.cross_entropy(lp, targets).unwrap()
}

fn autodiff() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = RngStream::new(1).split_named("autodiff");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let nets = 120;
    for _ in 0..nets {
        let batch = rng.gen_range(1..5);
        let depth = rng.gen_range(1..4);
        let mut widths = vec![rng.gen_range(1..6)];
        for _ in 0..depth {
            widths.push(rng.gen_range(1..6));
        }
        *widths.last_mut().unwrap() = rng.gen_range(2..5);
        let acts: Vec<u8> = (0..depth).map(|_| rng.gen_range(0..3)).collect();
        let targets: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..widths[depth])).collect();
        let mut inputs = vec![(vec![batch, widths[0]], rand_vec(&mut rng, batch * widths[0], -1.0, 1.0))];
        for l in 0..depth {
            let (a, b) = (widths[l], widths[l + 1]);
            inputs.push((vec![a, b], rand_vec(&mut rng, a * b, -1.0, 1.0)));
            inputs.push((vec![b], rand_vec(&mut rng, b, -0.5, 0.5)));
        }
        let eval = |vals: &[(Vec<usize>, Vec<f64>)]| {
            let mut t = Tape::no_grad();
            let vs: Vec<Var> = vals.iter().map(|(s, d)| t.constant(s.clone(), d.clone()).unwrap()).collect();
            let l = random_network(&mut t, &vs, &acts, &targets);
            t.scalar(l)
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|(s, d)| t.variable(s.clone(), d.clone()).unwrap()).collect();
        let loss = random_network(&mut t, &vars, &acts, &targets);
        let grads = t.backward(loss)?;
        for (i, (_, data)) in inputs.iter().enumerate() {
            let g = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; data.len()]);
            for j in 0..data.len() {
                let mut up = inputs.clone();
                up[i].1[j] += h;
                let mut down = inputs.clone();
                down[i].1[j] -= h;
                let fd = (eval(&up) - eval(&down)) / (2.0 * h);
                worst = worst.max((g[j] - fd).abs() / g[j].abs().max(fd.abs()).max(1e-3));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 30.0,
        format!("{nets} networks, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

// ---------------------------------------------------------------- operator

fn operator() -> Result<Outcome> {
    let root = RngStream::new(2).split_named("operator");
    let step = 1e-5;
    let mut worst_ad: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut identity_failures = 0;
    let n = 1000;
    for inst in 0..n {
        let mut rng = root.split(inst);
        let k = rng.gen_range(1..6);
        let w = rng.gen_range(1..5);
        let pos = rand_vec(&mut rng, k * w, -2.0, 2.0);
        let neg = rand_vec(&mut rng, k * w, -2.0, 2.0);
        let probs = rand_vec(&mut rng, k, 0.01, 0.99);
        let mu = rand_vec(&mut rng, k, 0.0, 1.0);
        let expert: Vec<f64> = (0..k).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        let backbone = |t: &mut Tape, p: &[f64]| BackboneOutput {
            pos: t.constant(vec![1, k * w], pos.clone()).unwrap(),
            neg: t.constant(vec![1, k * w], neg.clone()).unwrap(),
            probs: t.constant(vec![1, k], p.to_vec()).unwrap(),
            logits: t.constant(vec![1, k], vec![0.0; k]).unwrap(),
            width: w,
            logit_bottleneck: false,
            anchored: true,
        };
        let forward = |p: &[f64], m: &[f64], e: &[f64]| -> Vec<f64> {
            let mut t = Tape::no_grad();
            let bo = backbone(&mut t, p);
            let m = t.constant(vec![1, k], m.to_vec()).unwrap();
            let e = t.constant(vec![1, k], e.to_vec()).unwrap();
            let out = intervene(&mut t, &bo, m, e).unwrap();
            t.value(out).to_vec()
        };
        let i = rng.gen_range(0..k);
        let mut mu0 = mu.clone();
        mu0[i] = 0.0;
        let mut flipped = expert.clone();
        flipped[i] = 1.0 - flipped[i];
        let a = forward(&probs, &mu0, &expert);
        let b = forward(&probs, &mu0, &flipped);
        let full = vec![1.0; k];
        let other: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let independent = (0..w).all(|j| (a[i * w + j] - b[i * w + j]).abs() <= 1e-6);
        let ignores_p = forward(&probs, &full, &expert)
            .iter()
            .zip(forward(&other, &full, &expert))
            .all(|(x, y)| (x - y).abs() <= 1e-6);
        if !independent || !ignores_p {
            identity_failures += 1;
        }

        let analytic = mask_gradient(expert[i], probs[i], &pos[i * w..(i + 1) * w], &neg[i * w..(i + 1) * w]);
        for j in 0..w {
            let mut t = Tape::new();
            let bo = backbone(&mut t, &probs);
            let m = t.variable(vec![1, k], mu.clone())?;
            let e = t.constant(vec![1, k], expert.clone())?;
            let out = intervene(&mut t, &bo, m, e)?;
            let mut sel = vec![0.0; k * w];
            sel[i * w + j] = 1.0;
            let sel = t.constant(vec![1, k * w], sel)?;
            let picked = t.mul(out, sel)?;
            let loss = t.sum(picked)?;
            let g = t.backward(loss)?.get(m).map(|g| g[i]).unwrap_or(0.0);
            let mut up = mu.clone();
            up[i] += step;
            let mut down = mu.clone();
            down[i] -= step;
            let fd = (forward(&probs, &up, &expert)[i * w + j] - forward(&probs, &down, &expert)[i * w + j]) / (2.0 * step);
            worst_ad = worst_ad.max((g - analytic[j]).abs());
            worst_fd = worst_fd.max((fd - analytic[j]).abs());
        }
    }
    outcome(
        identity_failures == 0 && worst_ad < 1e-6 && worst_fd < 1e-6,
        format!(
            "{n} instances, {identity_failures} identity failures, autodiff error {worst_ad:.1e}, finite-difference error {worst_fd:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- skyline

fn random_model(rng: &mut RngStream, variant: Variant, groups: Groups, n_classes: usize) -> Result<ConceptModel> {
    let cfg = ModelConfig {
        n_inputs: 5,
        n_concepts: groups.n_concepts(),
        emb_width: 3,
        n_classes,
        groups,
        hidden_f: vec![6],
        hidden_psi: vec![8],
        backbone_hidden: vec![7],
        variant,
    };
    let mut m = ConceptModel::new(cfg, rng)?;
    if variant == Variant::JointLogitCbm {
        let x = rand_vec(rng, 5 * 40, -2.0, 2.0);
        m.fit_logit_anchors(&x, 40)?;
    }
    Ok(m)
}

struct States {
    x: Vec<f64>,
    masks: Vec<f64>,
    experts: Vec<f64>,
    truth: Vec<f64>,
    labels: Vec<usize>,
}

/// Random group-consistent states leaving at least one group free.
fn random_states(model: &ConceptModel, n: usize, rng: &mut RngStream) -> States {
    let cfg = model.config();
    let k = cfg.n_concepts;
    let groups = &cfg.groups;
    let mut s = States {
        x: rand_vec(rng, n * cfg.n_inputs, -2.0, 2.0),
        masks: vec![0.0; n * k],
        experts: vec![0.5; n * k],
        truth: vec![0.0; n * k],
        labels: Vec::new(),
    };
    for r in 0..n {
        let keep = rng.gen_range(0..groups.len());
        for g in 0..groups.len() {
            let on = g != keep && rng.gen_bool(0.4);
            for &i in groups.members(g) {
                s.truth[r * k + i] = f64::from(u8::from(rng.gen_bool(0.5)));
                if on {
                    s.masks[r * k + i] = 1.0;
                    s.experts[r * k + i] = s.truth[r * k + i];
                }
            }
        }
        s.labels.push(rng.gen_range(0..cfg.n_outputs()));
    }
    s
}

fn skyline() -> Result<Outcome> {
    let root = RngStream::new(3).split_named("skyline");
    let variants = [Variant::IntCem, Variant::Cem, Variant::JointSigmoidCbm, Variant::JointLogitCbm];
    let (mut checked, mut mismatches) = (0, 0);
    for m in 0..25u64 {
        let mut rng = root.split(m);
        let g = rng.gen_range(1..=8);
        let sizes: Vec<usize> = (0..g).map(|_| rng.gen_range(1..4)).collect();
        let n_classes = rng.gen_range(1..4);
        let model = random_model(&mut rng, variants[m as usize % 4], Groups::contiguous(&sizes)?, n_classes)?;
        let n = 20;
        let s = random_states(&model, n, &mut rng);
        let state = model.encode(&s.x, n)?;
        let rows: Vec<usize> = (0..n).collect();
        let batch = StateBatch {
            state: &state,
            rows: &rows,
            masks: &s.masks,
            experts: &s.experts,
            truth: Some((&s.truth, &s.labels)),
        };
        let fused = Policy::Skyline.next_groups(&model, &batch, &mut [])?;
        let k = model.config().n_concepts;
        for r in 0..n {
            let sl = r * k..(r + 1) * k;
            let ex = skyline_exhaustive(&model, &state, r, &s.masks[sl.clone()], &s.experts[sl.clone()], &s.truth[sl], s.labels[r])?;
            checked += 1;
            if ex != fused[r] {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{checked} states, {mismatches} mismatches"))
}

// ---------------------------------------------------------------- gumbel

fn gumbel() -> Result<Outcome> {
    let omega = [0.4, -1.2, 1.5, 0.0, -0.3];
    let z: f64 = omega.iter().map(|w: &f64| w.exp()).sum();
    let expected: Vec<f64> = omega.iter().map(|w| w.exp() / z).collect();
    let mut rng = RngStream::new(4).split_named("gumbel");
    let draws = 10_000;
    let mut counts = [0usize; 5];
    let (mut not_one_hot, mut zero_grad) = (0, 0);
    for _ in 0..draws {
        let mut t = Tape::new();
        let w = t.variable(vec![1, 5], omega.to_vec())?;
        let y = gumbel_softmax(&mut t, w, 1.0, true, &mut rng)?;
        let v = t.value(y).to_vec();
        if v.iter().filter(|&&x| x == 1.0).count() != 1 || v.iter().any(|&x| x != 0.0 && x != 1.0) {
            not_one_hot += 1;
        } else {
            counts[v.iter().position(|&x| x == 1.0).unwrap()] += 1;
        }
        let c = t.constant(vec![1, 5], vec![1.0, -2.0, 0.5, 3.0, -1.0])?;
        let p = t.mul(y, c)?;
        let l = t.sum(p)?;
        if t.backward(l)?.get(w).map_or(true, |g| g.iter().all(|&x| x == 0.0)) {
            zero_grad += 1;
        }
    }
    let worst_z = expected
        .iter()
        .zip(counts)
        .map(|(&p, c)| (c as f64 / draws as f64 - p).abs() / (p * (1.0 - p) / draws as f64).sqrt())
        .fold(0.0f64, f64::max);
    outcome(
        not_one_hot == 0 && zero_grad == 0 && worst_z < 3.0,
        format!("{draws} draws, {not_one_hot} not one-hot, {zero_grad} zero gradients, max deviation {worst_z:.2} SE"),
    )
}

// ---------------------------------------------------------------- losses

fn losses() -> Result<Outcome> {
    let v = loss_pred_value(1.0, 0.5, 1.1, 2);
    let oracle = (1.0 + 1.1 * 1.1 * 0.5) / (1.0 + 1.1 * 1.1);
    let pred_ok = (v - oracle).abs() < 1e-9 && format!("{v:.5}") == "0.72624";

    let g = 8;
    let mut rng = RngStream::new(5);
    let n = 32;
    let x = rand_vec(&mut rng, n * 3, -1.0, 1.0);
    let c: Vec<f64> = (0..n * g).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let data = Split::new(3, 2, Groups::singletons(g), x, c, y)?;
    let cfg = ModelConfig {
        n_inputs: 3,
        n_concepts: g,
        emb_width: 3,
        n_classes: 2,
        groups: Groups::singletons(g),
        hidden_f: vec![6],
        hidden_psi: vec![8],
        backbone_hidden: vec![6],
        variant: Variant::IntCem,
    };
    let tc = TrainConfig {
        force_horizon: Some(1),
        p_int: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(ConceptModel::new(cfg, &mut rng)?, tc, &data)?;
    let ids: Vec<_> = t.model.params().ids().collect();
    for id in ids {
        if t.model.params().name(id).starts_with("psi.") {
            t.model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let rows: Vec<usize> = (0..n).collect();
    let r = t.compute_gradients(&data, &rows, Phase::Joint)?;
    let roll_err = (r.roll - (g as f64).ln()).abs();
    outcome(
        pred_ok && roll_err < 1e-9,
        format!("loss_pred {v:.9} (oracle {oracle:.9}), uniform rollout loss error {roll_err:.1e} against ln {g}"),
    )
}

// ---------------------------------------------------------------- training

struct SeedRun {
    seed: u64,
    intcem: Checkpoint,
    prep: Prepared,
    int_curve: InterventionCurve,
    rand_curve: InterventionCurve,
    elapsed: Duration,
}

fn train_seeds() -> Result<Vec<SeedRun>> {
    let mut out = Vec::new();
    for seed in 0..SEEDS {
        let start = Instant::now();
        let (intcem, _, prep) = train_run(&RunConfig::synthetic(Variant::IntCem, seed))?;
        let (randint, _, _) = train_run(&RunConfig::synthetic(Variant::Cem, seed))?;
        let opts = CurveOptions::default();
        let int_curve = run_curve(&intcem.model, &prep.data.test, &Policy::Random, seed, &opts)?;
        let rand_curve = run_curve(&randint.model, &prep.data.test, &Policy::Random, seed, &opts)?;
        let elapsed = start.elapsed();
        println!(
            "      seed {seed}: IntCEM {:?}  RandInt-CEM {:?}  ({:.0}s)",
            int_curve.points.iter().map(|p| round3(p.1)).collect::<Vec<_>>(),
            rand_curve.points.iter().map(|p| round3(p.1)).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        );
        out.push(SeedRun {
            seed,
            intcem,
            prep,
            int_curve,
            rand_curve,
            elapsed,
        });
    }
    Ok(out)
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

fn central_claim(runs: &[SeedRun]) -> Result<Outcome> {
    let g = runs[0].intcem.model.config().n_groups();
    let at = |c: &InterventionCurve, n: usize| curve_at(c, n).context("curve point");
    let (mut wins_half, mut wins_full, mut max_gap, mut max_secs) = (0, 0, 0.0f64, 0.0f64);
    for r in runs {
        wins_half += usize::from(at(&r.int_curve, g / 2)? > at(&r.rand_curve, g / 2)?);
        wins_full += usize::from(at(&r.int_curve, g)? > at(&r.rand_curve, g)?);
        max_gap = max_gap.max((at(&r.int_curve, 0)? - at(&r.rand_curve, 0)?).abs());
        max_secs = max_secs.max(r.elapsed.as_secs_f64());
    }
    let n = runs.len();
    outcome(
        wins_half == n && wins_full == n && max_gap < 0.03 && max_secs < 900.0,
        format!(
            "IntCEM ahead at 50% on {wins_half}/{n} seeds, at 100% on {wins_full}/{n}; max unintervened gap {:.1}pp; slowest seed {max_secs:.0}s",
            100.0 * max_gap
        ),
    )
}

fn policy_ordering(runs: &[SeedRun]) -> Result<Outcome> {
    let mut learned_wins = 0;
    let mut skyline_failures = Vec::new();
    for r in runs {
        let ck = &r.intcem;
        let bc_cfg = BcConfig::default();
        let mut ck_bc = ck.clone();
        ck_bc.bc = Some(
            conceptlab_core::policy::bc_train(&ck.model, &r.prep.train, &bc_cfg, &mut RngStream::new(r.seed).split_named("bc"))?.0,
        );
        let mut scores = Vec::new();
        for kind in PolicyKind::ALL {
            let policy = build_policy(kind, &ck_bc, &r.prep.val, &r.prep.train, None, r.seed)?;
            let curve = run_curve(&ck.model, &r.prep.data.test, &policy, r.seed, &CurveOptions::default())?;
            scores.push((kind, auic(&curve)));
        }
        let get = |k: PolicyKind| scores.iter().find(|s| s.0 == k).unwrap().1;
        learned_wins += usize::from(get(PolicyKind::LearnedPsi) >= get(PolicyKind::Random));
        let sky = get(PolicyKind::Skyline);
        if let Some((k, v)) = scores.iter().find(|s| s.1 > sky) {
            skyline_failures.push(format!("seed {} {} {v:.4} > skyline {sky:.4}", r.seed, k.name()));
        }
        println!(
            "      seed {}: {}",
            r.seed,
            scores.iter().map(|(k, v)| format!("{} {v:.4}", k.name())).collect::<Vec<_>>().join(", ")
        );
    }
    let n = runs.len();
    outcome(
        learned_wins >= 4 && skyline_failures.is_empty(),
        format!(
            "learned ψ ≥ random on {learned_wins}/{n} seeds; skyline dominates on {}/{n}{}",
            n - skyline_failures.len(),
            if skyline_failures.is_empty() { String::new() } else { format!(" ({})", skyline_failures.join("; ")) }
        ),
    )
}

fn adversarial(runs: &[SeedRun]) -> Result<Outcome> {
    let mut ok = 0;
    let mut pairs = Vec::new();
    for r in runs {
        let opts = CurveOptions {
            adversarial: true,
            ..CurveOptions::default()
        };
        let c = run_curve(&r.intcem.model, &r.prep.data.test, &Policy::Random, r.seed, &opts)?;
        let (first, last) = (c.points[0].1, c.points[c.points.len() - 1].1);
        ok += usize::from(last < first);
        pairs.push(format!("{first:.3}→{last:.3}"));
    }
    outcome(ok == runs.len(), format!("lower on {ok}/{} seeds ({})", runs.len(), pairs.join(", ")))
}

// ---------------------------------------------------------------- coop

fn coop_degeneracy() -> Result<Outcome> {
    let mut rng = RngStream::new(9).split_named("coop");
    let (mut same, mut total) = (0, 0);
    for (m, alpha) in [0.1, 1.0, 10.0, 100.0].into_iter().enumerate() {
        let g = rng.gen_range(2..=8);
        let sizes: Vec<usize> = (0..g).map(|_| rng.gen_range(1..4)).collect();
        let variant = [Variant::Cem, Variant::IntCem, Variant::JointSigmoidCbm, Variant::JointLogitCbm][m];
        let model = random_model(&mut rng, variant, Groups::contiguous(&sizes)?, 3)?;
        let n = 25;
        let s = random_states(&model, n, &mut rng);
        let state = model.encode(&s.x, n)?;
        let rows: Vec<usize> = (0..n).collect();
        let order = |policy: &Policy| -> Result<Vec<Vec<usize>>> {
            let k = model.config().n_concepts;
            let groups = &model.config().groups;
            let (mut masks, mut experts) = (s.masks.clone(), s.experts.clone());
            let mut seq = vec![Vec::new(); n];
            loop {
                let live: Vec<usize> = (0..n)
                    .filter(|&r| !conceptlab_core::policy::free_groups(groups, &masks[r * k..(r + 1) * k]).is_empty())
                    .collect();
                if live.is_empty() {
                    return Ok(seq);
                }
                let sub = |v: &[f64]| live.iter().flat_map(|&r| v[r * k..(r + 1) * k].to_vec()).collect::<Vec<_>>();
                let (lm, le) = (sub(&masks), sub(&experts));
                let lrows: Vec<usize> = live.iter().map(|&r| rows[r]).collect();
                let batch = StateBatch {
                    state: &state,
                    rows: &lrows,
                    masks: &lm,
                    experts: &le,
                    truth: None,
                };
                for (&r, g) in live.iter().zip(policy.next_groups(&model, &batch, &mut [])?) {
                    seq[r].push(g);
                    for &i in groups.members(g) {
                        masks[r * k + i] = 1.0;
                        experts[r * k + i] = s.truth[r * k + i];
                    }
                }
            }
        };
        let a = order(&Policy::Ucp)?;
        let b = order(&Policy::Coop(CoopConfig::new(alpha, 0.0)?))?;
        same += a.iter().zip(&b).filter(|(x, y)| x == y).count();
        total += n;
    }
    outcome(same == total, format!("{same}/{total} states with identical full orderings"))
}

// ---------------------------------------------------------------- determinism

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let run = r#"{"dataset": {"kind": "synthetic", "group_sizes": [2, 2, 2, 2], "noise": [0.1, 0.2, 0.1, 0.2],
        "weights": [0, 1, 0, 1.2, 0, 0.8, 0, 1], "threshold": 2.0, "jitter": 0.3,
        "incomplete_fraction": 0.5, "n_train": 300, "n_test": 100, "seed": 1},
      "model": {"variant": "IntCEM", "emb_width": 4, "hidden_f": [8], "hidden_psi": [16], "backbone_hidden": [8]},
      "train": {"epochs_max": 5, "batch_size": 32, "seed": 3}}"#;
    std::fs::write(p("run.json"), run)?;
    let exe = env!("CARGO_BIN_EXE_conceptlab");
    let cmd = |args: &[&str]| -> Result<()> {
        let out = Command::new(exe).args(args).output()?;
        ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        Ok(())
    };
    for tag in ["a", "b"] {
        cmd(&["train", "--config", &p("run.json"), "--out", &p(&format!("{tag}.ck")), "--log", &p(&format!("{tag}.log"))])?;
        for policy in ["random", "ucp", "learned_psi"] {
            cmd(&["curve", "--checkpoint", &p("a.ck"), "--policy", policy, "--seed", "7", "--out", &p(&format!("{tag}-{policy}.csv"))])?;
        }
    }
    let same = |x: &str, y: &str| -> Result<bool> { Ok(std::fs::read(p(x))? == std::fs::read(p(y))?) };
    let logs = same("a.log", "b.log")?;
    let cks = same("a.ck", "b.ck")?;
    let curves = ["random", "ucp", "learned_psi"]
        .iter()
        .map(|q| same(&format!("a-{q}.csv"), &format!("b-{q}.csv")))
        .collect::<Result<Vec<_>>>()?;
    outcome(
        logs && curves.iter().all(|&c| c),
        format!("epoch logs identical: {logs}; checkpoints identical: {cks}; curve CSVs identical: {curves:?}"),
    )
}

// ---------------------------------------------------------------- mnist-add

fn idx_images(n: usize, base: u8) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 3];
    for d in [n as u32, 28, 28] {
        out.extend(d.to_be_bytes());
    }
    for i in 0..n {
        out.extend(std::iter::repeat(base.wrapping_add((i % 11) as u8)).take(784));
    }
    out
}

fn idx_labels(n: usize) -> Vec<u8> {
    let mut out = vec![0, 0, 8, 1];
    out.extend((n as u32).to_be_bytes());
    out.extend((0..n).map(|i| (i % 10) as u8));
    out
}

fn mnist_add() -> Result<Outcome> {
    let files = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];
    let provided = std::env::var_os("CONCEPTLAB_MNIST_DIR").filter(|d| files.iter().all(|f| Path::new(d).join(f).exists()));
    let tmp = tempfile::tempdir()?;
    let (dir, source) = match provided {
        Some(d) => (Path::new(&d).to_path_buf(), "provided IDX files"),
        None => {
            std::fs::write(tmp.path().join(files[0]), idx_images(200, 30))?;
            std::fs::write(tmp.path().join(files[1]), idx_labels(200))?;
            std::fs::write(tmp.path().join(files[2]), idx_images(100, 150))?;
            std::fs::write(tmp.path().join(files[3]), idx_labels(100))?;
            (tmp.path().to_path_buf(), "generated IDX fixtures")
        }
    };
    let spec = MnistAddSpec::new(&dir);
    let (train, test) = spec.build()?;
    let mut bad_labels = 0;
    for s in [&train, &test] {
        for r in 0..s.len() {
            let sum: usize = operand_values(s, r).iter().sum();
            bad_labels += usize::from(s.y[r] != usize::from(sum >= spec.threshold));
        }
    }
    let incomplete = MnistAddSpec {
        drop_groups: 4,
        ..spec.clone()
    };
    let (itrain, itest) = incomplete.build()?;
    let ok = (train.len(), test.len()) == (12_000, 10_000)
        && train.n_concepts() == 72
        && train.groups.len() == 12
        && bad_labels == 0
        && itrain.n_concepts() == 54
        && itest.n_concepts() == 54;
    outcome(
        ok,
        format!(
            "{source}: {}/{} samples, {} concepts in {} groups, {bad_labels} label-rule violations, incomplete variant {} concepts",
            train.len(),
            test.len(),
            train.n_concepts(),
            train.groups.len(),
            itrain.n_concepts()
        ),
    )
}

// ---------------------------------------------------------------- replay

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<String>) -> Result<Value> {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))?;
    let resp = app.clone().oneshot(req).await?;
    ensure!(resp.status().is_success(), "{uri}: {}", resp.status());
    Ok(serde_json::from_slice(&resp.into_body().collect().await?.to_bytes())?)
}

fn class_dist_bits(v: &Value) -> Vec<u64> {
    v["class_dist"].as_array().map_or_else(Vec::new, |a| a.iter().map(|x| x.as_f64().unwrap().to_bits()).collect())
}

fn service_replay() -> Result<Outcome> {
    let mut rng = RngStream::new(12).split_named("replay");
    let groups = Groups::contiguous(&[2, 1, 3, 1, 2, 1, 1, 4, 1, 2, 1, 1])?;
    let k = groups.n_concepts();
    let model = random_model(&mut rng, Variant::IntCem, groups.clone(), 4)?;
    let n = 10;
    let mut c = vec![0.0; n * k];
    for r in 0..n {
        for g in 0..groups.len() {
            let m = groups.members(g);
            c[r * k + m[rng.gen_range(0..m.len())]] = 1.0;
        }
    }
    let data = Split::new(5, 4, groups.clone(), rand_vec(&mut rng, n * 5, -2.0, 2.0), c, (0..n).map(|i| i % 4).collect())?;
    let dir = tempfile::tempdir()?;
    let log = dir.path().join("sessions.jsonl");
    let cfg = || ServiceConfig {
        policy: Policy::LearnedPsi,
        data: Some(data.clone()),
        demo: true,
        log_path: Some(log.clone()),
    };

    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let live = rt.block_on(async {
        let (state, _) = AppState::open(model.clone(), cfg())?;
        let app = router(state);
        let mut live = Vec::new();
        let v = call(&app, Method::POST, "/sessions", Some(r#"{"sample_index": 3}"#.into())).await?;
        let id = v["session_id"].as_u64().unwrap();
        live.push(v);
        // 20 logged steps: creation, then suggested interventions with an
        // undo every third step, which keeps free groups available.
        while live.len() < 20 {
            let v = if live.len() % 3 == 2 {
                call(&app, Method::POST, &format!("/sessions/{id}/undo"), None).await?
            } else {
                let s = call(&app, Method::GET, &format!("/sessions/{id}/suggest"), None).await?;
                let g = s["group"].as_u64().unwrap();
                let body = serde_json::json!({"group": g, "value": 0}).to_string();
                call(&app, Method::POST, &format!("/sessions/{id}/intervene"), Some(body)).await?
            };
            live.push(v);
        }
        anyhow::Ok(live)
    })?;
    let (_, replayed) = AppState::open(model, cfg())?;
    let matching = live
        .iter()
        .zip(&replayed)
        .filter(|(a, b)| !class_dist_bits(a).is_empty() && class_dist_bits(a) == class_dist_bits(b))
        .count();
    outcome(
        replayed.len() == 20 && matching == 20,
        format!("{} logged steps replayed, {matching}/20 class distributions bit-identical", replayed.len()),
    )
}

// ---------------------------------------------------------------- main

fn main() {
    let mut failures = 0;
    let mut report = |name: &str, res: Result<Outcome>| {
        let (passed, detail) = match res {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failures += usize::from(!passed);
        println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    };
    report("autodiff matches finite differences", autodiff());
    report("intervention operator identities and mask gradient", operator());
    report("fused skyline equals enumeration", skyline());
    report("straight-through gumbel sampling", gumbel());
    report("loss arithmetic", losses());
    match train_seeds() {
        Ok(runs) => {
            report("IntCEM beats RandInt-CEM under random interventions", central_claim(&runs));
            report("policy ordering", policy_ordering(&runs));
            report("adversarial interventions hurt", adversarial(&runs));
        }
        Err(e) => {
            for name in ["IntCEM beats RandInt-CEM under random interventions", "policy ordering", "adversarial interventions hurt"] {
                report(name, Err(anyhow::anyhow!("training failed: {e:#}")));
            }
        }
    }
    report("CooP with β = 0 orders like UCP", coop_degeneracy());
    report("train and curve are deterministic", determinism());
    report("MNIST-Add construction", mnist_add());
    report("service replay reproduces class distributions", service_replay());
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
