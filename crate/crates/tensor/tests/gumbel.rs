use conceptlab_tensor::{gumbel_softmax, RngStream, Tape};

/// Gumbel-max property: the argmax of `log p + h` is distributed as `p`.
#[test]
fn straight_through_frequencies_match_class_probabilities() {
    let probs = [0.7, 0.2, 0.1];
    let log_probs: Vec<f64> = probs.iter().map(|p: &f64| p.ln()).collect();
    let mut rng = RngStream::new(99);
    let draws = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let mut t = Tape::new();
        let w = t.variable(vec![1, 3], log_probs.clone()).unwrap();
        let y = gumbel_softmax(&mut t, w, 1.0, true, &mut rng).unwrap();
        let v = t.value(y);
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 1);
        assert_eq!(v.iter().sum::<f64>(), 1.0);
        counts[v.iter().position(|&x| x == 1.0).unwrap()] += 1;

        // a non-constant downstream loss must reach the logits
        let c = t.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = t.mul(y, c).unwrap();
        let l = t.sum(p).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(w).unwrap().iter().any(|&x| x != 0.0));
    }
    for (i, &p) in probs.iter().enumerate() {
        let freq = counts[i] as f64 / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        assert!((freq - p).abs() < 3.0 * se, "class {i}: {freq} vs {p}");
    }
}

#[test]
fn soft_sample_sums_to_one() {
    let mut rng = RngStream::new(1);
    let mut t = Tape::new();
    let w = t.variable(vec![2, 4], vec![-1.0, -2.0, -0.3, -4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let y = gumbel_softmax(&mut t, w, 0.5, false, &mut rng).unwrap();
    for row in t.value(y).chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
    }
}
