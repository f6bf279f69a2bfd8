//! Property tests for the library's structural invariants: facts that must
//! hold for every input, not just the worked examples in the unit tests.

use proptest::prelude::*;

use semileak::attacks::{
    distance, entropy, learn_threshold, modified_entropy, sorted_posterior_feature,
};
use semileak::config::SimFn;
use semileak::data::stratified_mask;
use semileak::defenses::topk_filter;
use semileak::eval::{auc, entropy_histogram, js_entropy_distance};
use semileak::models::{softmax, PosteriorVector};
use semileak::rng::stream;
use semileak::ssl::sharpen;

/// A valid posterior: positive entries normalized to sum 1.
fn posterior(max_classes: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(1e-3..1.0f64, 2..=max_classes).prop_map(|raw| {
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    })
}

/// Two posteriors over the same class count.
fn posterior_pair(max_classes: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_classes).prop_flat_map(|c| {
        let one = prop::collection::vec(1e-3..1.0f64, c).prop_map(|raw| {
            let z: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / z).collect::<Vec<f64>>()
        });
        (one.clone(), one)
    })
}

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..1.0f64, 1..=max_len)
}

/// Scores drawn from a small grid, so ties actually occur.
fn tied_scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..8).prop_map(|v| f64::from(v) / 8.0), 1..=max_len)
}

proptest! {
    // ----- distances ------------------------------------------------------

    #[test]
    fn distances_are_symmetric_nonnegative_zero_on_self(
        (p, q) in posterior_pair(8),
        sim in prop::sample::select(vec![
            SimFn::Js, SimFn::Cosine, SimFn::Correlation, SimFn::Euclidean,
        ]),
    ) {
        let d_pq = distance(sim, &p, &q).unwrap();
        let d_qp = distance(sim, &q, &p).unwrap();
        prop_assert!(d_pq >= 0.0, "{sim:?} negative: {d_pq}");
        prop_assert!((d_pq - d_qp).abs() < 1e-12, "{sim:?} asymmetric");
        let d_pp = distance(sim, &p, &p).unwrap();
        prop_assert!(d_pp.abs() < 1e-9, "{sim:?} self-distance {d_pp}");
    }

    #[test]
    fn js_distance_is_bounded_by_one((p, q) in posterior_pair(8)) {
        let d = distance(SimFn::Js, &p, &q).unwrap();
        prop_assert!(d <= 1.0 + 1e-12, "js above one: {d}");
    }

    // ----- posterior features and metrics ---------------------------------

    #[test]
    fn sorted_feature_is_descending_and_class_permutation_invariant(
        p in posterior(10),
        shift in 0usize..10,
    ) {
        let pv = PosteriorVector { probs: p.clone() };
        let feat = sorted_posterior_feature(&pv);
        prop_assert!(feat.windows(2).all(|w| w[0] >= w[1]));
        // any rotation of the classes yields the identical feature
        let k = shift % p.len();
        let mut rotated = p[k..].to_vec();
        rotated.extend_from_slice(&p[..k]);
        let rv = PosteriorVector { probs: rotated };
        prop_assert_eq!(feat, sorted_posterior_feature(&rv));
    }

    #[test]
    fn entropy_lies_in_the_class_count_range(p in posterior(8)) {
        let e = entropy(&p);
        prop_assert!(e >= -1e-12);
        prop_assert!(e <= (p.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn modified_entropy_is_nonnegative(p in posterior(8), pick in 0usize..8) {
        let label = pick % p.len();
        let v = modified_entropy(&p, label).unwrap();
        prop_assert!(v >= -1e-12, "negative modified entropy {v}");
    }

    // ----- threshold learner ----------------------------------------------

    #[test]
    fn learned_threshold_is_consistent_and_at_least_chance(
        member in tied_scores(30),
        nonmember in tied_scores(30),
    ) {
        let (theta, acc) = learn_threshold(&member, &nonmember).unwrap();
        // the reported accuracy is what the reported threshold achieves
        let tpr = member.iter().filter(|&&s| s >= theta).count() as f64
            / member.len() as f64;
        let tnr = nonmember.iter().filter(|&&s| s < theta).count() as f64
            / nonmember.len() as f64;
        prop_assert!((acc - 0.5 * (tpr + tnr)).abs() < 1e-12);
        // accepting nobody is always available, so chance is a floor
        prop_assert!(acc >= 0.5 - 1e-12);
        prop_assert!(acc <= 1.0 + 1e-12);
        // no observed score beats it
        for &t in member.iter().chain(&nonmember) {
            let tpr = member.iter().filter(|&&s| s >= t).count() as f64
                / member.len() as f64;
            let tnr = nonmember.iter().filter(|&&s| s < t).count() as f64
                / nonmember.len() as f64;
            prop_assert!(0.5 * (tpr + tnr) <= acc + 1e-12);
        }
    }

    // ----- ranking --------------------------------------------------------

    #[test]
    fn auc_is_a_probability_and_antisymmetric(
        member in tied_scores(40),
        nonmember in tied_scores(40),
    ) {
        let a = auc(&member, &nonmember).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let swapped = auc(&nonmember, &member).unwrap();
        prop_assert!((a + swapped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_survives_monotone_score_transforms(
        member in scores(40),
        nonmember in scores(40),
        scale in 0.1..5.0f64,
        offset in -2.0..2.0f64,
    ) {
        let a = auc(&member, &nonmember).unwrap();
        let warp = |v: &[f64]| -> Vec<f64> {
            v.iter().map(|&s| scale * s + offset).collect()
        };
        let b = auc(&warp(&member), &warp(&nonmember)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    // ----- sharpening ------------------------------------------------------

    #[test]
    fn sharpen_returns_a_posterior_and_keeps_the_winner(
        p in posterior(10),
        temp in 0.05..3.0f64,
    ) {
        let s = sharpen(&p, temp).unwrap();
        let sum: f64 = s.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(s.iter().all(|&v| v >= 0.0));
        let am = |v: &[f64]| (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
        prop_assert_eq!(am(&p), am(&s));
    }

    #[test]
    fn sharpen_at_unit_temperature_is_identity(p in posterior(10)) {
        let s = sharpen(&p, 1.0).unwrap();
        for (a, b) in p.iter().zip(&s) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    // ----- softmax ---------------------------------------------------------

    #[test]
    fn softmax_is_a_valid_posterior_preserving_the_argmax(
        logits in prop::collection::vec(-30.0..30.0f32, 2..10),
    ) {
        let p = softmax(&logits);
        p.validate().unwrap();
        let lm = (0..logits.len())
            .max_by(|&a, &b| logits[a].total_cmp(&logits[b]))
            .unwrap();
        prop_assert_eq!(p.argmax(), lm);
    }

    // ----- entropy histograms ---------------------------------------------

    #[test]
    fn entropy_histogram_is_a_distribution(
        posts in prop::collection::vec(posterior(4), 1..20),
        bins in 1usize..40,
    ) {
        let posts: Vec<PosteriorVector> = posts
            .into_iter()
            .map(|mut p| {
                p.resize(4, 0.0);
                let z: f64 = p.iter().sum();
                PosteriorVector { probs: p.iter().map(|v| v / z).collect() }
            })
            .collect();
        let h = entropy_histogram(&posts, bins, 4).unwrap();
        prop_assert_eq!(h.len(), bins);
        let sum: f64 = h.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(h.iter().all(|&v| v >= 0.0));
        // distance of a set to itself is zero; range is [0, 1]
        let d = js_entropy_distance(&posts, &posts, bins, 4).unwrap();
        prop_assert!(d.abs() < 1e-12);
    }

    // ----- top-k filtering -------------------------------------------------

    #[test]
    fn topk_keeps_the_largest_entries_untouched(
        p in posterior(8),
        k in 1usize..8,
    ) {
        let mut filtered = p.clone();
        topk_filter(&mut filtered, k).unwrap();
        let kept = filtered.iter().filter(|&&v| v != 0.0).count();
        prop_assert!(kept <= k.min(p.len()));
        // surviving entries are unchanged and dominate the dropped ones
        let dropped_max = p
            .iter()
            .zip(&filtered)
            .filter(|(_, &f)| f == 0.0)
            .map(|(&o, _)| o)
            .fold(0.0f64, f64::max);
        for (&orig, &f) in p.iter().zip(&filtered) {
            if f != 0.0 {
                prop_assert_eq!(orig, f);
                prop_assert!(orig >= dropped_max);
            }
        }
        if k >= p.len() {
            prop_assert_eq!(&filtered, &p);
        }
    }

    // ----- stratified labeling --------------------------------------------

    #[test]
    fn stratified_mask_hits_the_exact_count_with_balanced_classes(
        seed in 0u64..1000,
        labels in prop::collection::vec(0usize..3, 3..60),
        want in 3usize..20,
    ) {
        let ids: Vec<usize> = (0..labels.len()).collect();
        let classes = 3;
        let mut rng = stream(seed, "prop").rng(&[0]);
        match stratified_mask(&ids, &labels, classes, want, &mut rng) {
            Ok(mask) => {
                prop_assert_eq!(mask.len(), ids.len());
                prop_assert_eq!(mask.iter().filter(|&&m| m).count(), want);
                // any class with samples to spare stays within one of the
                // even share, up to what spilling forced elsewhere
                let mut labeled = [0usize; 3];
                let mut total = [0usize; 3];
                for (i, &lab) in labels.iter().enumerate() {
                    total[lab] += 1;
                    if mask[i] {
                        labeled[lab] += 1;
                    }
                }
                for c in 0..classes {
                    prop_assert!(labeled[c] <= total[c]);
                }
            }
            Err(_) => {
                // only impossible requests may fail
                prop_assert!(want > ids.len() || want < classes);
            }
        }
    }

    // ----- seed streams ----------------------------------------------------

    #[test]
    fn rng_streams_are_deterministic_and_name_separated(
        seed in 0u64..u64::MAX / 2,
        tag in 0u64..1000,
    ) {
        use rand::RngCore;
        let a = stream(seed, "alpha");
        let b = stream(seed, "alpha");
        prop_assert_eq!(a.rng(&[tag]).next_u64(), b.rng(&[tag]).next_u64());
        let c = stream(seed, "beta");
        prop_assert_ne!(a.rng(&[tag]).next_u64(), c.rng(&[tag]).next_u64());
        let child = a.child("gamma");
        prop_assert_ne!(a.rng(&[tag]).next_u64(), child.rng(&[tag]).next_u64());
    }
}
