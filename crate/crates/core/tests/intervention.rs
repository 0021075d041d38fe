use conceptlab_core::groups::Groups;
use conceptlab_core::intervention::{intervene, mask_gradient, ExpertConcepts, InterventionMask};
use conceptlab_core::model::BackboneOutput;
use conceptlab_tensor::{RngStream, Tape};
use proptest::prelude::*;
use rand::Rng;

struct Instance {
    k: usize,
    w: usize,
    pos: Vec<f64>,
    neg: Vec<f64>,
    probs: Vec<f64>,
    mu: Vec<f64>,
    expert: Vec<f64>,
}

fn instance(rng: &mut RngStream) -> Instance {
    let k = rng.gen_range(1..6);
    let w = rng.gen_range(1..5);
    let mut v = |n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    let pos = v(k * w);
    let neg = v(k * w);
    Instance {
        k,
        w,
        pos,
        neg,
        probs: (0..k).map(|_| rng.gen_range(0.01..0.99)).collect(),
        mu: (0..k).map(|_| rng.gen_range(0.0..1.0)).collect(),
        expert: (0..k).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
    }
}

fn backbone(t: &mut Tape, inst: &Instance, probs: &[f64]) -> BackboneOutput {
    let kw = inst.k * inst.w;
    BackboneOutput {
        pos: t.constant(vec![1, kw], inst.pos.clone()).unwrap(),
        neg: t.constant(vec![1, kw], inst.neg.clone()).unwrap(),
        probs: t.constant(vec![1, inst.k], probs.to_vec()).unwrap(),
        logits: t.constant(vec![1, inst.k], vec![0.0; inst.k]).unwrap(),
        width: inst.w,
        logit_bottleneck: false,
        anchored: true,
    }
}

fn forward(inst: &Instance, probs: &[f64], mu: &[f64], expert: &[f64]) -> Vec<f64> {
    let mut t = Tape::no_grad();
    let bo = backbone(&mut t, inst, probs);
    let m = t.constant(vec![1, inst.k], mu.to_vec()).unwrap();
    let e = t.constant(vec![1, inst.k], expert.to_vec()).unwrap();
    let out = intervene(&mut t, &bo, m, e).unwrap();
    t.value(out).to_vec()
}

#[test]
fn operator_identities_and_mask_gradient_on_random_instances() {
    let root = RngStream::new(11);
    let h = 1e-5;
    for n in 0..1000 {
        let mut rng = root.split(n);
        let inst = instance(&mut rng);
        let (k, w) = (inst.k, inst.w);

        // μ_i = 0 makes segment i independent of c̃_i.
        let mut mu0 = inst.mu.clone();
        let i = rng.gen_range(0..k);
        mu0[i] = 0.0;
        let mut flipped = inst.expert.clone();
        flipped[i] = 1.0 - flipped[i];
        let a = forward(&inst, &inst.probs, &mu0, &inst.expert);
        let b = forward(&inst, &inst.probs, &mu0, &flipped);
        assert_eq!(a[i * w..(i + 1) * w], b[i * w..(i + 1) * w]);

        // Full intervention ignores p̂.
        let full = vec![1.0; k];
        let other: Vec<f64> = inst.probs.iter().map(|p| 1.0 - p).collect();
        assert_eq!(forward(&inst, &inst.probs, &full, &inst.expert), forward(&inst, &other, &full, &inst.expert));

        // ∂ segment_i / ∂ μ_i, autodiff against the closed form.
        let mut t = Tape::new();
        let bo = backbone(&mut t, &inst, &inst.probs);
        let mu = t.variable(vec![1, k], inst.mu.clone()).unwrap();
        let e = t.constant(vec![1, k], inst.expert.clone()).unwrap();
        let out = intervene(&mut t, &bo, mu, e).unwrap();
        let j = rng.gen_range(0..w);
        let mut sel = vec![0.0; k * w];
        sel[i * w + j] = 1.0;
        let sel = t.constant(vec![1, k * w], sel).unwrap();
        let picked = t.mul(out, sel).unwrap();
        let loss = t.sum(picked).unwrap();
        let grads = t.backward(loss).unwrap();
        let g = grads.get(mu).unwrap();
        let analytic = mask_gradient(
            inst.expert[i],
            inst.probs[i],
            &inst.pos[i * w..(i + 1) * w],
            &inst.neg[i * w..(i + 1) * w],
        )[j];
        assert!((g[i] - analytic).abs() < 1e-6, "autodiff {} vs {analytic}", g[i]);
        for (l, gl) in g.iter().enumerate() {
            if l != i {
                assert_eq!(*gl, 0.0);
            }
        }

        let mut up = inst.mu.clone();
        up[i] += h;
        let mut down = inst.mu.clone();
        down[i] -= h;
        let fd = (forward(&inst, &inst.probs, &up, &inst.expert)[i * w + j]
            - forward(&inst, &inst.probs, &down, &inst.expert)[i * w + j])
            / (2.0 * h);
        assert!((fd - analytic).abs() < 1e-6, "finite difference {fd} vs {analytic}");
    }
}

#[test]
fn worked_example_with_two_dimensional_embeddings() {
    let inst = Instance {
        k: 1,
        w: 2,
        pos: vec![1.0, 0.0],
        neg: vec![0.0, 1.0],
        probs: vec![0.3],
        mu: vec![1.0],
        expert: vec![1.0],
    };
    assert_eq!(mask_gradient(1.0, 0.3, &inst.pos, &inst.neg), vec![0.7, -0.7]);
    assert_eq!(forward(&inst, &inst.probs, &inst.mu, &inst.expert), vec![1.0, 0.0]);
    let q = forward(&inst, &inst.probs, &[0.0], &inst.expert);
    assert!((q[0] - 0.3).abs() < 1e-15 && (q[1] - 0.7).abs() < 1e-15);
}

#[test]
fn non_binary_expert_on_intervened_concept_is_rejected() {
    let inst = Instance {
        k: 1,
        w: 1,
        pos: vec![1.0],
        neg: vec![0.0],
        probs: vec![0.3],
        mu: vec![1.0],
        expert: vec![0.5],
    };
    let mut t = Tape::no_grad();
    let bo = backbone(&mut t, &inst, &inst.probs);
    let m = t.constant(vec![1, 1], vec![1.0]).unwrap();
    let e = t.constant(vec![1, 1], vec![0.5]).unwrap();
    assert!(intervene(&mut t, &bo, m, e).is_err());
}

fn groups_strategy() -> impl Strategy<Value = Groups> {
    proptest::collection::vec(1usize..4, 1..7).prop_map(|sizes| Groups::contiguous(&sizes).unwrap())
}

proptest! {
    #[test]
    fn group_masks_stay_consistent(groups in groups_strategy(), picks in proptest::collection::vec(0usize..10, 0..12)) {
        let mut mask = InterventionMask::empty(groups.n_concepts());
        for p in picks {
            let g = p % groups.len();
            mask = mask.or_group(&groups, g).unwrap();
            prop_assert!(mask.is_group_intervened(&groups, g));
            prop_assert!(mask.is_group_consistent(&groups));
        }
        let n_int = mask.intervened_groups(&groups).len();
        prop_assert_eq!(n_int + mask.free_groups(&groups).len(), groups.len());
    }

    #[test]
    fn accumulated_masks_never_exceed_one(
        base in proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 1..10),
        delta_seed in any::<u64>(),
    ) {
        let mask = InterventionMask::from_values(base.clone()).unwrap();
        let mut rng = RngStream::new(delta_seed);
        let delta: Vec<f64> = base.iter().map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let next = mask.accumulate(&delta).unwrap();
        for ((b, d), v) in base.iter().zip(&delta).zip(next.values()) {
            prop_assert!(*v <= 1.0 && *v >= 0.0);
            prop_assert_eq!(*v, (b + d).min(1.0));
        }
    }

    #[test]
    fn expert_from_truth_matches_truth_on_intervened_concepts(
        truth in proptest::collection::vec(prop_oneof![Just(0.0), Just(1.0)], 1..10),
        bits in any::<u16>(),
    ) {
        let values: Vec<f64> = (0..truth.len()).map(|i| f64::from((bits >> i) & 1)).collect();
        let mask = InterventionMask::from_values(values).unwrap();
        let e = ExpertConcepts::from_truth(&truth, &mask).unwrap();
        prop_assert!(e.validate(&mask).is_ok());
        for ((m, t), v) in mask.values().iter().zip(&truth).zip(e.values()) {
            if *m == 1.0 {
                prop_assert_eq!(v, t);
            }
        }
    }
}
