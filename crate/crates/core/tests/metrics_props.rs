mod common;

use cmoe_lab::metrics::*;
use common::{clipped_matches, lcs_brute};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0, 0.0f64..100.0)
        .prop_map(|(a, b, c, d)| BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap())
}

fn words() -> impl Strategy<Value = Vec<&'static str>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..9)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(p in bbox(), g in bbox()) {
        let v = iou(&p, &g);
        prop_assert_eq!(v, iou(&g, &p));
        prop_assert!((0.0..=1.0).contains(&v));
        if p.area() > 0.0 {
            prop_assert!((iou(&p, &p) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn integer_boxes_survive_the_text_codec(a in 0u8..=100, b in 0u8..=100, c in 0u8..=100, d in 0u8..=100) {
        let b0 = BBox::new(a.min(b) as f64, c.min(d) as f64, a.max(b) as f64, c.max(d) as f64).unwrap();
        let back = BBox::decode(&b0.encode()).unwrap();
        prop_assert!((back.xmin - b0.xmin).abs() <= 1e-9 && (back.ymin - b0.ymin).abs() <= 1e-9);
        prop_assert!((back.xmax - b0.xmax).abs() <= 1e-9 && (back.ymax - b0.ymax).abs() <= 1e-9);
    }

    #[test]
    fn codec_rounds_to_the_nearest_grid_point(b in bbox()) {
        let back = BBox::decode(&b.encode()).unwrap();
        prop_assert!((back.xmin - b.xmin).abs() <= 0.5 && (back.ymax - b.ymax).abs() <= 0.5);
    }

    #[test]
    fn xywh_round_trip(b in bbox(), w in 10.0f64..2000.0, h in 10.0f64..2000.0) {
        let [x, y, bw, bh] = b.to_xywh(w, h);
        let back = bbox_from_xywh(x, y, bw, bh, w, h).unwrap();
        prop_assert!((back.xmin - b.xmin).abs() <= 1e-9 && (back.ymin - b.ymin).abs() <= 1e-9);
        prop_assert!((back.xmax - b.xmax).abs() <= 1e-9 && (back.ymax - b.ymax).abs() <= 1e-9);
    }

    #[test]
    fn lcs_matches_enumeration(a in words(), b in words()) {
        prop_assert_eq!(lcs(&a, &b), lcs_brute(&a, &b));
        prop_assert_eq!(lcs(&a, &b), lcs(&b, &a));
    }

    #[test]
    fn ngram_scores_match_naive_counting(c in words(), r in words(), n in 1usize..4) {
        let (m, t) = clipped_matches(&c, &r, n);
        let want = if t == 0 { 0.0 } else { m as f64 / t as f64 };
        prop_assert!((bleu_n(&c, &r, n) - want).abs() <= 1e-12);
        let (m, t) = clipped_matches(&r, &c, n);
        let want = if t == 0 { 0.0 } else { m as f64 / t as f64 };
        prop_assert!((rouge_n(&c, &r, n) - want).abs() <= 1e-12);
    }

    #[test]
    fn text_scores_are_bounded(c in words(), r in words()) {
        for v in [word_f1(&c, &r), bleu_n(&c, &r, 1), rouge_n(&c, &r, 2), rouge_l(&c, &r)] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(word_f1(&c, &r), word_f1(&r, &c));
    }
}

#[test]
fn tagged_examples_and_oracles() {
    common::criteria::metric_formulas(2000).unwrap();
}

#[test]
fn tokenisation_lowercases() {
    assert_eq!(tokenize("Left  LUNG\tnodule"), vec!["left", "lung", "nodule"]);
    assert_eq!(word_f1(&tokenize("Left Lung"), &tokenize("left lung")), 1.0);
}

#[test]
fn malformed_boxes_are_rejected() {
    assert!(BBox::new(10.0, 0.0, 5.0, 5.0).is_err());
    assert!(BBox::new(0.0, 0.0, 101.0, 5.0).is_err());
    assert!(BBox::decode("<1><2><3><4>").is_err());
    assert!(BBox::decode("{<1><2><3>}").is_err());
    assert_eq!(BBox::decode("{<1><2><3><4>}").unwrap().encode(), "{<1><2><3><4>}");
}
