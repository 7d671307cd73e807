mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_eer, random_trials};
use slid::metrics::{compute_eer, macro_accuracy, micro_accuracy, Prediction, PredictionSet, ScoreRecord, TrialLabel};

#[test]
fn sweep_matches_brute_force_on_random_sets() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trials = random_trials(200, &mut rng);
        let fast = compute_eer(&trials).unwrap().eer;
        let slow = brute_force_eer(&trials);
        assert!((fast - slow).abs() < 1e-9, "seed {seed}: {fast} vs {slow}");
    }
}

fn balanced_predictions(truth_and_pred: &[(usize, usize)], classes: usize) -> PredictionSet {
    let name = |c: usize| format!("L{c:02}");
    PredictionSet::new(
        (0..classes).map(name).collect(),
        truth_and_pred
            .iter()
            .enumerate()
            .map(|(i, &(t, p))| Prediction {
                utt_id: format!("u{i}"),
                truth: name(t),
                predicted: name(p),
            })
            .collect(),
    )
}

fn trials_from(scores: &[(f64, bool)]) -> Vec<ScoreRecord> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &(score, target))| ScoreRecord {
            enroll_id: format!("e{i}"),
            test_id: format!("t{i}"),
            score,
            label: if target { TrialLabel::Target } else { TrialLabel::Nontarget },
        })
        .collect()
}

fn with_both_labels() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((-50i32..50, any::<bool>()), 2..80).prop_map(|mut v| {
        v[0].1 = true;
        v[1].1 = false;
        v.into_iter().map(|(s, t)| (f64::from(s) / 10.0, t)).collect()
    })
}

#[test]
fn perfect_separation_and_total_inversion() {
    let separated = trials_from(&[(0.9, true), (0.8, true), (0.1, false), (-0.3, false)]);
    assert_eq!(compute_eer(&separated).unwrap().eer, 0.0);
    let inverted = trials_from(&[(-0.9, true), (-0.8, true), (0.1, false), (0.3, false)]);
    assert_eq!(compute_eer(&inverted).unwrap().eer, 1.0);
}

proptest! {
    #[test]
    fn agrees_with_brute_force(scores in with_both_labels()) {
        let t = trials_from(&scores);
        prop_assert!((compute_eer(&t).unwrap().eer - brute_force_eer(&t)).abs() < 1e-9);
    }

    #[test]
    fn invariant_under_strictly_increasing_maps(scores in with_both_labels()) {
        let t = trials_from(&scores);
        let mapped: Vec<ScoreRecord> = t
            .iter()
            .map(|r| ScoreRecord { score: (r.score * 0.7).exp() + 3.0, ..r.clone() })
            .collect();
        prop_assert!((compute_eer(&t).unwrap().eer - compute_eer(&mapped).unwrap().eer).abs() < 1e-12);
    }

    #[test]
    fn negating_scores_mirrors_the_rate(scores in prop::collection::vec((-50i32..50, any::<bool>()), 2..80)
        .prop_map(|mut v| {
            v[0].1 = true;
            v[1].1 = false;
            // distinct scores keep the sweep free of ties
            v.iter_mut().enumerate().for_each(|(i, p)| p.0 = p.0 * 100 + i as i32);
            v.into_iter().map(|(s, t)| (f64::from(s), t)).collect::<Vec<_>>()
        }))
    {
        let t = trials_from(&scores);
        let flipped: Vec<ScoreRecord> = t.iter().map(|r| ScoreRecord { score: -r.score, ..r.clone() }).collect();
        let (a, b) = (compute_eer(&t).unwrap().eer, compute_eer(&flipped).unwrap().eer);
        prop_assert!((a + b - 1.0).abs() < 1e-9, "{a} + {b}");
    }

    #[test]
    fn order_of_trials_is_irrelevant(scores in with_both_labels(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let t = trials_from(&scores);
        let mut shuffled = t.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(compute_eer(&t).unwrap(), compute_eer(&shuffled).unwrap());
    }

    #[test]
    fn eer_is_a_rate(scores in with_both_labels()) {
        let e = compute_eer(&trials_from(&scores)).unwrap().eer;
        prop_assert!((0.0..=1.0).contains(&e));
    }

    #[test]
    fn macro_equals_micro_on_balanced_sets(
        classes in 2usize..6,
        per_class in 1usize..6,
        noise in prop::collection::vec(0usize..6, 36),
    ) {
        let pairs: Vec<(usize, usize)> = (0..classes * per_class)
            .map(|i| (i % classes, noise[i] % classes))
            .collect();
        let set = balanced_predictions(&pairs, classes);
        prop_assert_eq!(macro_accuracy(&set).unwrap(), micro_accuracy(&set).unwrap());
    }
}
