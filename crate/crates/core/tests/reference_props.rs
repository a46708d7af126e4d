use ctcat::reference::*;
use ctcat::synth::{random_unit_vectors, synth, AlignmentSpec, Span};
use ctcat::{enroll, Detector, Level, Vocabulary};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn log_rows(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|x| (x / s).ln()).collect()
        })
        .collect()
}

fn ctc_instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize)> {
    (2usize..=4, 1usize..=6).prop_flat_map(|(width, t_len)| {
        (
            proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, width), t_len),
            proptest::collection::vec(0..width - 1, 1..=3),
            0..width,
        )
            .prop_map(|(raw, label, blank)| {
                let label = label.into_iter().map(|k| if k >= blank { k + 1 } else { k }).collect();
                (log_rows(&raw), label, blank)
            })
    })
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, labels: u32) -> Vec<MiniBatchTuple> {
    let ae = random_unit_vectors(rng, n, d);
    let te = random_unit_vectors(rng, n, d);
    ae.into_iter()
        .zip(te)
        .enumerate()
        .map(|(i, (ae, te))| MiniBatchTuple {
            ae,
            te,
            label: i as u32 % labels,
        })
        .collect()
}

proptest! {
    #[test]
    fn forward_recursion_equals_enumeration((lp, label, blank) in ctc_instance()) {
        let fwd = ctc_label_logprob(&lp, &label, blank).unwrap();
        let brute = ctc_label_logprob_enumerated(&lp, &label, blank).unwrap();
        if brute == f64::NEG_INFINITY {
            prop_assert_eq!(fwd, f64::NEG_INFINITY);
        } else {
            prop_assert!((fwd - brute).abs() < 1e-9, "{} vs {}", fwd, brute);
            prop_assert!(fwd.exp() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn multi_view_is_permutation_and_scale_invariant(seed: u64, n in 2usize..12, d in 1usize..8, labels in 1u32..4, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tuples = random_batch(&mut rng, n, d, labels);
        let params = MultiViewParams::default();
        let base = multi_view_loss(&MiniBatch::new(tuples.clone()).unwrap(), params);
        prop_assert!(base.is_finite() && base >= 0.0);

        let mut shuffled = tuples.clone();
        shuffled.shuffle(&mut rng);
        let perm = multi_view_loss(&MiniBatch::new(shuffled).unwrap(), params);
        prop_assert!((perm - base).abs() < 1e-9);

        let scaled: Vec<MiniBatchTuple> = tuples
            .iter()
            .map(|t| MiniBatchTuple {
                ae: t.ae.iter().map(|x| x * c).collect(),
                te: t.te.iter().map(|x| x * c).collect(),
                label: t.label,
            })
            .collect();
        let sc = multi_view_loss(&MiniBatch::new(scaled).unwrap(), params);
        prop_assert!((sc - base).abs() < 1e-9);
    }

    #[test]
    fn multi_view_is_monotone_in_pair_similarity(seed: u64, d in 2usize..6, eps in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_unit_vectors(&mut rng, 4, d);
        let params = MultiViewParams::default();
        let loss = |a1: &[f64], t1: &[f64], a2: &[f64], t2: &[f64], same: bool| {
            let batch = MiniBatch::new(vec![
                MiniBatchTuple { ae: a1.to_vec(), te: t1.to_vec(), label: 0 },
                MiniBatchTuple { ae: a2.to_vec(), te: t2.to_vec(), label: if same { 0 } else { 1 } },
            ])
            .unwrap();
            multi_view_loss(&batch, params)
        };
        // nudging a2 towards t1 raises only S(t1, a2)
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let closer: Vec<f64> = unit(v[2].iter().zip(&v[1]).map(|(a, t)| a + eps * t).collect());
        prop_assume!(cos(&closer, &v[1]) > cos(&v[2], &v[1]) + 1e-9);
        prop_assert!(loss(&v[0], &v[1], &closer, &v[3], true) < loss(&v[0], &v[1], &v[2], &v[3], true));
        // with different labels the same nudge raises only S(a2, t1), a negative pair;
        // at beta = 50 the softplus can underflow against the other term, hence >=
        prop_assert!(loss(&v[0], &v[1], &closer, &v[3], false) >= loss(&v[0], &v[1], &v[2], &v[3], false));
        let (before, after) = (cos(&v[2], &v[1]), cos(&closer, &v[1]));
        if before > 0.0 && after < 0.2 {
            prop_assert!(loss(&v[0], &v[1], &closer, &v[3], false) > loss(&v[0], &v[1], &v[2], &v[3], false));
        }
    }
}

#[test]
fn multi_view_closed_forms() {
    let e = vec![1.0, 0.0];
    let same = MiniBatch::new(vec![
        MiniBatchTuple {
            ae: e.clone(),
            te: e.clone(),
            label: 7,
        },
        MiniBatchTuple {
            ae: e.clone(),
            te: e.clone(),
            label: 7,
        },
    ])
    .unwrap();
    let expected = 0.5 * (1.0 + (2.0f64 * (0.1 - 1.0)).exp()).ln();
    assert!((multi_view_loss(&same, MultiViewParams::default()) - expected).abs() < 1e-12);

    let diff = MiniBatch::new(vec![
        MiniBatchTuple {
            ae: vec![1.0, 0.0],
            te: vec![1.0, 0.0],
            label: 0,
        },
        MiniBatchTuple {
            ae: vec![0.0, 1.0],
            te: vec![0.0, 1.0],
            label: 1,
        },
    ])
    .unwrap();
    let expected = (1.0 + (-5.0f64).exp()).ln();
    assert!((multi_view_loss(&diff, MultiViewParams::default()) - expected).abs() < 1e-12);
    assert!(matches!(MiniBatch::new(vec![]), Err(KernelError::BatchTooSmall(0))));
}

#[test]
fn objective_composes() {
    let lp = vec![vec![0.6f64.ln(), 0.4f64.ln()]];
    let l_ctc = -ctc_label_logprob(&lp, &[0], 1).unwrap();
    let l_mv = 0.5 * (1.0 + (-1.8f64).exp()).ln();
    assert!((training_objective(l_ctc, l_mv) - (-(0.6f64.ln()) + l_mv)).abs() < 1e-15);
    assert_eq!(training_objective(1.0, 0.5), 1.5);
    assert_eq!(training_objective(0.0, 0.0), 0.0);
}

#[test]
fn best_end_frame_of_planted_keyword() {
    // keyword occupies frames 10..=20, padding before and after
    let vocab = Vocabulary::english();
    let kw = vocab.tokenize("cab").unwrap();
    let trail = 6;
    let spec = AlignmentSpec {
        keyword: "cab".into(),
        spans: vec![
            Span { start: 10, end: 13 },
            Span { start: 14, end: 17 },
            Span { start: 18, end: 20 },
        ],
        total_frames: 20 + trail,
        gamma: 0.9,
        sigma: 0.1,
        seed: 5,
        frame_rate_hz: 100.0,
    };
    let te = random_unit_vectors(&mut ChaCha8Rng::seed_from_u64(1), kw.len(), 4);
    let (stream, truth) = synth(&vocab, &spec, &te).unwrap();
    assert_eq!((truth.keyword_start, truth.keyword_end), (10, 20));

    let (enr, _) = enroll(&vocab, "cab", te, Level::Character, 6.0, Default::default()).unwrap();
    let mut det = Detector::new(&vocab, enr).unwrap();
    let z_ctc: Vec<f64> = (0..stream.frames())
        .map(|t| {
            let lp: Vec<f64> = stream.log_posterior_row(t).iter().map(|&x| x as f64).collect();
            let e: Vec<f64> = stream.embedding_row(t).iter().map(|&x| x as f64).collect();
            det.push(&lp, &e).unwrap().z_ctc
        })
        .collect();
    let t_opt = find_best_end_frame(&z_ctc).unwrap();
    assert!((20..=20 + trail as u64).contains(&t_opt), "t_optimal = {t_opt}");
    assert_eq!(find_best_end_frame(&[-5.0, -2.0, -3.0]), Some(2));
    assert_eq!(find_best_end_frame(&[1.0, 1.0, 1.0]), Some(1));
}
