use copa_core::copa::{copa_forward, predict_adjusted, RatioModel, TrainConfig};
use copa_core::eval::{f1_score, mean_and_stderr, select_checkpoint, ConfusionCounts};
use copa_core::nn::{AdamState, FusionNet};
use copa_core::prevalence::{count_prevalence, marginal_prevalence, PrevalenceEstimate, SmoothingConfig};
use copa_core::scm::{bayes_posterior, make_mixing_matrix, LabelPair, Sample, ScmParams};
use copa_core::train::Checkpoint;
use copa_core::whiten::Whitening;
use proptest::prelude::*;

fn model(seed: u64) -> RatioModel {
    RatioModel {
        net: FusionNet::new(TrainConfig::default().arch(2, 1, 2), seed).unwrap(),
    }
}

fn prob2() -> impl Strategy<Value = Vec<f64>> {
    (1e-6f64..1.0).prop_map(|p| vec![1.0 - p, p])
}

fn pairs() -> impl Strategy<Value = Vec<LabelPair>> {
    prop::collection::vec((0usize..2, 0u8..3), 1..60).prop_map(|v| {
        v.into_iter()
            .map(|(y, z)| LabelPair {
                y,
                z: vec![f64::from(z)],
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn prevalence_scaling_leaves_predictions_unchanged(
        seed in 0u64..50,
        x in prop::array::uniform2(-3.0f64..3.0),
        z in 0u8..2,
        prev in prob2(),
        c in 1e-3f64..1e3,
    ) {
        let m = model(seed);
        let z = [f64::from(z)];
        let a = copa_forward(&m, &x, &z, &prev).unwrap();
        let scaled: Vec<f64> = prev.iter().map(|p| p * c).collect();
        let b = copa_forward(&m, &x, &z, &scaled).unwrap();
        prop_assert_eq!(a.label, b.label);
        for (p, q) in a.probs.iter().zip(&b.probs) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn adjusted_output_is_a_distribution(
        seed in 0u64..50,
        x in prop::array::uniform2(-3.0f64..3.0),
        prev in prob2(),
    ) {
        let p = copa_forward(&model(seed), &x, &[1.0], &prev).unwrap();
        prop_assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(p.probs.iter().all(|v| *v >= 0.0));
        let best = if p.probs[1] > p.probs[0] { 1 } else { 0 };
        prop_assert_eq!(p.label, best);
    }

    #[test]
    fn raw_ratio_does_not_depend_on_site(
        seed in 0u64..20,
        xs in prop::collection::vec(prop::array::uniform2(-3.0f64..3.0), 1..10),
        pa in prob2(),
        pb in prob2(),
    ) {
        let m = model(seed);
        let samples: Vec<Sample> = xs.iter().enumerate().map(|(i, x)| Sample {
            x: x.to_vec(), y: 0, z: vec![(i % 2) as f64], site_id: "a".into(),
        }).collect();
        let a = predict_adjusted(&m, &samples, &vec![pa; samples.len()]).unwrap();
        let mut other = samples.clone();
        other.iter_mut().for_each(|s| s.site_id = "b".into());
        let b = predict_adjusted(&m, &other, &vec![pb; samples.len()]).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(&p.raw_ratio, &q.raw_ratio);
        }
    }

    #[test]
    fn counting_queries_are_distributions(ps in pairs(), c in 0.0f64..3.0, z in 0u8..5) {
        let est = count_prevalence(&ps, SmoothingConfig { pseudo_count: c }, 2).unwrap();
        let q = est.query(&[f64::from(z)]).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(q.iter().all(|v| *v > 0.0 && *v < 1.0));
        let m = marginal_prevalence(&ps, SmoothingConfig { pseudo_count: c }, 2).unwrap();
        let q = m.query(&[]).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn posterior_ignores_prevalence_scale(
        x in prop::array::uniform2(-2.0f64..2.0),
        p in 0.01f64..0.99,
    ) {
        let w = make_mixing_matrix(4);
        let params = ScmParams::default();
        let est = PrevalenceEstimate::marginal(vec![1.0 - p, p]).unwrap();
        let post = bayes_posterior(&x, 1, &w, &params, &est).unwrap();
        prop_assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // doubling the odds of class 1 doubles the posterior odds
        let p2 = 2.0 * p / (1.0 - p + 2.0 * p);
        let est2 = PrevalenceEstimate::marginal(vec![1.0 - p2, p2]).unwrap();
        let post2 = bayes_posterior(&x, 1, &w, &params, &est2).unwrap();
        let odds = post[1] / post[0];
        let odds2 = post2[1] / post2[0];
        if odds.is_finite() && odds > 1e-200 && odds < 1e200 {
            prop_assert!((odds2 / odds - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn f1_is_bounded_and_matches_counts(
        labels in prop::collection::vec(0usize..2, 1..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let preds: Vec<usize> = labels.iter().zip(&flips).map(|(y, f)| if *f { 1 - y } else { *y }).collect();
        let f1 = f1_score(&preds, &labels, 1).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        let c = ConfusionCounts::from_predictions(&preds, &labels, 1).unwrap();
        prop_assert_eq!(c.total(), labels.len());
        if labels.contains(&1) {
            prop_assert_eq!(f1_score(&labels, &labels, 1).unwrap(), 1.0);
        }
    }

    #[test]
    fn selection_returns_the_earliest_maximum(scores in prop::collection::vec(0u8..4, 1..20)) {
        let cps: Vec<Checkpoint> = scores.iter().enumerate().map(|(i, s)| Checkpoint {
            step: (i + 1) * 500, train_loss: 0.0, params: vec![f64::from(*s)],
        }).collect();
        let sel = select_checkpoint(&cps, |p| Ok(p[0])).unwrap();
        let best = *scores.iter().max().unwrap();
        let first = scores.iter().position(|s| *s == best).unwrap();
        prop_assert_eq!(sel.index, first);
        prop_assert_eq!(sel.step, (first + 1) * 500);
    }

    #[test]
    fn standard_error_is_nonnegative(v in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let (m, se) = mean_and_stderr(&v);
        prop_assert!(se >= 0.0);
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn adam_is_deterministic(g in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let run = || {
            let mut p = vec![0.5; g.len()];
            let mut a = AdamState::new(g.len(), 1e-3);
            for _ in 0..5 { a.update(&mut p, &g).unwrap(); }
            p
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn whitening_round_trips(rows in prop::collection::vec(prop::array::uniform2(-5.0f64..5.0), 3..30)) {
        let w = match Whitening::fit(rows.iter().map(|r| r.as_slice())) {
            Ok(w) => w,
            Err(_) => return Ok(()),
        };
        for r in &rows {
            let back = w.invert(&w.apply(r).unwrap()).unwrap();
            prop_assert!((back[0] - r[0]).abs() < 1e-6 && (back[1] - r[1]).abs() < 1e-6);
        }
    }
}
