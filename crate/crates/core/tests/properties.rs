//! Property tests over the probabilistic primitives, string metrics, and
//! box geometry.

use distildoc_core::enrich::{serialize_plain, serialize_space};
use distildoc_core::geometry::{
    corner_distance, fully_contains, interpolate_bbox, iou, BBox, Corner, CornerNorm,
};
use distildoc_core::metrics::{anls_single, levenshtein, normalize_answer};
use distildoc_core::tensor::{kl_divergence, temp_softmax};
use proptest::prelude::*;

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, 1..32)
}

fn bbox_strategy() -> impl Strategy<Value = BBox> {
    (0.0..1000.0f64, 0.0..1000.0f64, 0.0..1000.0f64, 0.0..1000.0f64)
        .prop_map(|(a, b, c, d)| BBox::ordered(a, b, c, d))
}

fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in logits_strategy(), tau in 0.1..100.0f64) {
        let p = temp_softmax(&logits, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_is_shift_invariant(
        logits in logits_strategy(),
        tau in 0.1..100.0f64,
        shift in -100.0..100.0f64,
    ) {
        let p = temp_softmax(&logits, tau).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = temp_softmax(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_entropy_grows_with_temperature(logits in prop::collection::vec(-5.0..5.0f64, 2..8)) {
        prop_assume!(logits.iter().any(|&v| (v - logits[0]).abs() > 1e-6));
        let taus = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
        let mut last = f64::NEG_INFINITY;
        for tau in taus {
            let h = entropy(&temp_softmax(&logits, tau).unwrap());
            prop_assert!(h >= last - 1e-12, "entropy dropped from {last} to {h} at tau {tau}");
            last = h;
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(
        (p, q) in (2..16usize).prop_flat_map(|n| {
            (
                prop::collection::vec(1e-6..1.0f64, n..=n),
                prop::collection::vec(1e-6..1.0f64, n..=n),
            )
        }).prop_map(|(p_raw, q_raw)| {
            let norm = |raw: Vec<f64>| {
                let total: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / total).collect::<Vec<_>>()
            };
            (norm(p_raw), norm(q_raw))
        }),
    ) {
        let d = kl_divergence(&p, &q).unwrap();
        prop_assert!(d >= -1e-12, "KL was {d}");
        let close = p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-9);
        if d.abs() < 1e-12 {
            prop_assert!(close, "zero KL but distributions differ");
        }
        if close {
            prop_assert!(d.abs() < 1e-9);
        }
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn levenshtein_metric_axioms(
        a in "[a-d]{0,10}",
        b in "[a-d]{0,10}",
        c in "[a-d]{0,10}",
    ) {
        prop_assert_eq!(levenshtein(&a, &a), 0);
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
    }

    #[test]
    fn anls_never_lands_between_zero_and_threshold(
        pred in "[a-e ]{0,12}",
        gold in "[a-e ]{0,12}",
        threshold in 0.0..=1.0f64,
    ) {
        let score = anls_single(&pred, &[gold], threshold).unwrap();
        prop_assert!(score == 0.0 || (threshold..=1.0).contains(&score), "score {score}");
    }

    #[test]
    fn anls_symmetric_for_singleton_gold(a in "[a-e ]{0,12}", b in "[a-e ]{0,12}") {
        let ab = anls_single(&a, &[b.clone()], 0.5).unwrap();
        let ba = anls_single(&b, &[a], 0.5).unwrap();
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn normalization_is_idempotent(s in "[A-Za-z \t]{0,20}") {
        let once = normalize_answer(&s);
        prop_assert_eq!(normalize_answer(&once), once);
    }

    #[test]
    fn iou_symmetric_and_reflexive(a in bbox_strategy(), b in bbox_strategy()) {
        prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        if a.area() > 0.0 {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
        prop_assert!((0.0..=1.0).contains(&iou(&a, &b)));
    }

    #[test]
    fn containment_implies_area_ratio_iou(a in bbox_strategy(), b in bbox_strategy()) {
        if fully_contains(&a, &b) && a.area() > 0.0 && b.area() > 0.0 {
            prop_assert!((iou(&a, &b) - b.area() / a.area()).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_round_trips(
        b in bbox_strategy(),
        from in (1.0..4000.0f64, 1.0..4000.0f64),
        to in (1.0..4000.0f64, 1.0..4000.0f64),
    ) {
        let there = interpolate_bbox(&b, from, to).unwrap();
        let back = interpolate_bbox(&there, to, from).unwrap();
        for (x, y) in b.as_array().iter().zip(back.as_array()) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn corner_distance_metric_axioms(
        a in bbox_strategy(),
        b in bbox_strategy(),
        c in bbox_strategy(),
    ) {
        for norm in [CornerNorm::L1, CornerNorm::L2] {
            for corner in [Corner::TopLeft, Corner::BottomRight] {
                let ab = corner_distance(&a, &b, corner, norm);
                let ba = corner_distance(&b, &a, corner, norm);
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert_eq!(corner_distance(&a, &a, corner, norm), 0.0);
                let ac = corner_distance(&a, &c, corner, norm);
                let cb = corner_distance(&c, &b, corner, norm);
                prop_assert!(ab <= ac + cb + 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// On sparse grids (one token per row, plenty of width) the space
    /// serialization contains every token exactly once, and stripping all
    /// whitespace leaves the row-major concatenation.
    #[test]
    fn space_serialization_preserves_tokens(
        words in prop::collection::vec("[a-z]{1,6}", 1..8),
    ) {
        let cell = 10.0;
        let width = 200.0;
        let height = words.len() as f64 * cell;
        let tokens: Vec<String> = words.clone();
        let boxes: Vec<BBox> = (0..words.len())
            .map(|i| BBox {
                x1: 5.0,
                y1: i as f64 * cell + 1.0,
                x2: 5.0 + words[i].len() as f64,
                y2: (i + 1) as f64 * cell - 1.0,
            })
            .collect();
        let out = serialize_space(&tokens, &boxes, (width, height), (cell, cell)).unwrap();
        prop_assert_eq!(out.truncated_tokens, 0);
        for w in &words {
            prop_assert!(out.text.contains(w.as_str()));
        }
        let squashed: String = out.text.chars().filter(|c| !c.is_whitespace()).collect();
        prop_assert_eq!(squashed, words.concat());
    }

    #[test]
    fn plain_serialization_of_tagged_stream_keeps_token_subsequence(
        words in prop::collection::vec("[a-z]{1,6}", 0..10),
    ) {
        let mut tagged: Vec<String> = vec!["<Title>".to_string()];
        tagged.extend(words.iter().cloned());
        tagged.push("</Title>".to_string());
        let plain = serialize_plain(&tagged);
        let non_tag: Vec<&str> = plain
            .split(' ')
            .filter(|t| !t.starts_with('<') && !t.is_empty())
            .collect();
        prop_assert_eq!(non_tag.join(" "), serialize_plain(&words));
    }
}
