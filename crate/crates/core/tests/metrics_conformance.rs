mod common;

use common::*;
use mlcap::evalmetrics::{cider_r, gated_corpus_scores, rouge_l, CaptionLevel, CiderR, GtCaption, MatchedCaption, MeteorLite};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture_pairs() -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    cider_fixture().pairs.iter().map(|p| (words(&p.candidate), p.references.iter().map(|r| words(r)).collect())).collect()
}

#[test]
fn cider_matches_fixture_and_oracle() {
    let fx = cider_fixture();
    assert_eq!((fx.sigma, fx.max_n, fx.scale), (6.0, 4, 10.0));
    let pairs = fixture_pairs();
    let got = cider_r(&pairs);
    let oracle = oracle_cider(&pairs, fx.sigma);
    for ((g, o), p) in got.iter().zip(&oracle).zip(&fx.pairs) {
        assert!((g - p.expected).abs() < 1e-6, "{}: {g} vs fixture {}", p.candidate, p.expected);
        assert!((g - o).abs() < 1e-9, "{}: {g} vs oracle {o}", p.candidate);
        assert!((0.0..=10.0).contains(g));
    }
}

#[test]
fn cider_ignores_pair_order() {
    let pairs = fixture_pairs();
    let base = cider_r(&pairs);
    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let shuffled: Vec<_> = idx.iter().map(|&i| pairs[i].clone()).collect();
    let got = cider_r(&shuffled);
    for (k, &i) in idx.iter().enumerate() {
        assert_eq!(got[k], base[i]);
    }
}

#[test]
fn cider_identity_is_maximal_when_lengths_match() {
    let pairs = fixture_pairs();
    let refs: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
    let scorer = CiderR::new(&refs);
    for (c, r) in &pairs {
        let own = scorer.score(&r[0], &r[..1]);
        assert!(scorer.score(c, &r[..1]) <= own + 1e-12);
    }
}

#[test]
fn rouge_matches_enumeration_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..500 {
        let a: Vec<u32> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<u32> = (0..rng.gen_range(0..=8)).map(|_| rng.gen_range(0..5)).collect();
        assert!((rouge_l(&a, std::slice::from_ref(&b)) - oracle_rouge(&a, &b)).abs() < 1e-9, "{a:?} {b:?}");
    }
}

#[test]
fn meteor_hand_values() {
    let m = MeteorLite::default();
    let s = |c: &str, r: &str| m.score(&words(c), &[words(r)]);
    for n in 1..=8 {
        let text = (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        assert!((s(&text, &text) - (1.0 - 0.5 / (n as f64).powi(3))).abs() < 1e-9);
    }
    // "the chairs are red" vs "the red chair": exact the, red; stem chair; no two pairs adjacent → 3 chunks
    let p = 3.0 / 4.0;
    let r = 1.0;
    let f = 10.0 * p * r / (r + 9.0 * p);
    assert!((s("the chairs are red", "the red chair") - f * (1.0 - 0.5)).abs() < 1e-9);
    assert_eq!(s("blue lamp", "red chair"), 0.0);
    // "red wooden chair" vs "a wooden red chair": red→2, wooden→1, chair→3, three chunks
    let p = 1.0;
    let r = 3.0 / 4.0;
    let f = 10.0 * p * r / (r + 9.0 * p);
    assert!((s("red wooden chair", "a wooden red chair") - f * (1.0 - 0.5 * (3.0f64 / 3.0).powi(3))).abs() < 1e-9);
}

#[test]
fn gated_report_over_mixed_matches() {
    let items: Vec<GtCaption> = [("a red chair", Some(0.9)), ("a blue lamp", Some(0.3)), ("a green sofa", None)]
        .iter()
        .enumerate()
        .map(|(i, (t, iou))| GtCaption {
            gt_instance_id: format!("gt{i}"),
            references: vec![t.to_string()],
            matched: iou.map(|iou| MatchedCaption { iou, candidate: t.to_string() }),
        })
        .collect();
    let r = gated_corpus_scores(&items, CaptionLevel::Object, 0.5).unwrap();
    assert!((r.rouge - 100.0 / 3.0).abs() < 1e-9);
    assert_eq!((r.num_gt, r.num_gated), (3, 1));
}
