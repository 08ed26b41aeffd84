use proptest::prelude::*;

use tda_core::data::{make_batches, translate_rule, TripletExample};
use tda_core::metrics::{agreement_records, bleu, corpus_wer, edit_distance, wer};
use tda_core::objective::{build_dual_layouts, tda_objective, token_kl};
use tda_core::testing::ContextBlindStub;
use tda_core::vocab::Vocabulary;
use tda_core::Tensor;

fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn log(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

/// Inverse of the toy cipher: shift back by three and restore word order.
fn untranslate(text: &str) -> String {
    let words: Vec<String> = text
        .split(' ')
        .rev()
        .map(|w| w.chars().map(|c| (b'a' + (c as u8 - b'A' + 23) % 26) as char).collect())
        .collect();
    words.join(" ")
}

fn example(id: usize, frames: usize, z: usize, y: usize) -> TripletExample {
    TripletExample {
        id: format!("e{id}"),
        features: Tensor::zeros(&[frames, 2]),
        transcription: vec![5; z],
        translation: vec![6; y],
    }
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-e]{1,3}", 1..6)
}

proptest! {
    #[test]
    fn kl_is_non_negative(pair in (2usize..8).prop_flat_map(|n| (
        prop::collection::vec(1e-3f64..1.0, n),
        prop::collection::vec(1e-3f64..1.0, n),
    ))) {
        let (p, q) = (normalize(&pair.0), normalize(&pair.1));
        let kl = token_kl(&log(&p), &log(&q)).unwrap();
        prop_assert!(kl >= -1e-9);
        prop_assert!(token_kl(&log(&p), &log(&p)).unwrap().abs() < 1e-10);
    }

    #[test]
    fn penalty_is_monotone_in_lambda(
        nll in (0.0f64..10.0, 0.0f64..10.0),
        kl in (0.0f64..5.0, 0.0f64..5.0),
        l1 in 0.0f64..4.0,
        dl in 0.0f64..4.0,
    ) {
        let a = tda_objective(nll.0, nll.1, kl.0, kl.1, l1).unwrap();
        let b = tda_objective(nll.0, nll.1, kl.0, kl.1, l1 + dl).unwrap();
        prop_assert!(b.total >= a.total);
    }

    #[test]
    fn batches_partition_within_budget(
        sizes in prop::collection::vec((1usize..40, 1usize..8, 1usize..8), 1..40),
        budget in 40usize..400,
    ) {
        let examples: Vec<TripletExample> = sizes
            .iter()
            .enumerate()
            .map(|(i, &(f, z, y))| example(i, f, z, y))
            .collect();
        let batches = make_batches(&examples, budget).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..examples.len()).collect::<Vec<_>>());
        for b in &batches {
            prop_assert!(!b.is_empty());
            let longest = b.iter().map(|&i| examples[i].target_tokens()).max().unwrap();
            prop_assert!(b.len() * longest <= budget);
        }
    }

    #[test]
    fn cipher_is_invertible(ws in words()) {
        let text = ws.join(" ");
        let t = translate_rule(&text).unwrap();
        prop_assert_eq!(untranslate(&t), text.clone());
        prop_assert_eq!(t.chars().count(), text.chars().count());
    }

    #[test]
    fn vocabulary_round_trip(ws in words()) {
        let text = ws.join(" ");
        let vocab = Vocabulary::from_texts([text.as_str()]);
        prop_assert_eq!(vocab.decode(&vocab.encode(&text)), text.clone());
        prop_assert_eq!(Vocabulary::from_texts([text.as_str()]), vocab);
    }

    #[test]
    fn edit_distance_symmetry(a in prop::collection::vec(0u8..4, 1..12), b in prop::collection::vec(0u8..4, 0..12)) {
        let d = edit_distance(&a, &b);
        prop_assert_eq!(d, edit_distance(&b, &a));
        let w = wer(&a, &b).unwrap();
        prop_assert!((w * a.len() as f64 - d as f64).abs() < 1e-9);
    }

    #[test]
    fn corpus_metrics_bounds_and_order(
        pairs in prop::collection::vec((words(), words()), 1..8),
        rot in 0usize..8,
    ) {
        let refs: Vec<String> = pairs.iter().map(|p| p.0.join(" ")).collect();
        let hyps: Vec<String> = pairs.iter().map(|p| p.1.join(" ")).collect();
        let r: Vec<&str> = refs.iter().map(String::as_str).collect();
        let h: Vec<&str> = hyps.iter().map(String::as_str).collect();
        let b = bleu(&r, &h).unwrap();
        prop_assert!((0.0..=100.0).contains(&b));
        prop_assert_eq!(b == 100.0, r == h);
        prop_assert_eq!(bleu(&r, &r).unwrap(), 100.0);
        prop_assert_eq!(corpus_wer(&r, &r).unwrap(), 0.0);
        let k = rot % r.len();
        let (mut r2, mut h2) = (r.clone(), h.clone());
        r2.rotate_left(k);
        h2.rotate_left(k);
        prop_assert!((bleu(&r2, &h2).unwrap() - b).abs() < 1e-9);
        prop_assert!((corpus_wer(&r2, &h2).unwrap() - corpus_wer(&r, &h).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn context_blind_model_agrees_with_itself(
        z in prop::collection::vec(5u32..12, 1..5),
        y in prop::collection::vec(5u32..12, 1..5),
        seed in 0u64..1000,
    ) {
        let v = 12;
        let stub = ContextBlindStub::new(v, seed);
        let l = build_dual_layouts(&z, &y, v).unwrap();
        let lp_a = stub.teacher_forced(&l.a_input);
        let lp_b = stub.teacher_forced(&l.b_input);
        let n = l.a_input.len();
        let rec = agreement_records(&["x".into()], std::slice::from_ref(&l), &lp_a, &lp_b, n, v).unwrap();
        prop_assert!(rec[0].kl_fwd.abs() < 1e-8 && rec[0].kl_bwd.abs() < 1e-8);
        // content log-likelihood of each segment matches across layouts
        let span = |lp: &[f64], target: &[u32], r: std::ops::Range<usize>| -> f64 {
            r.map(|t| lp[t * v + target[t] as usize]).sum()
        };
        let (za, ya) = (0..z.len(), z.len() + 1..z.len() + 1 + y.len());
        let (yb, zb) = (0..y.len(), y.len() + 1..y.len() + 1 + z.len());
        prop_assert!((span(&lp_a, &l.a_target, za) - span(&lp_b, &l.b_target, zb)).abs() < 1e-6);
        prop_assert!((span(&lp_a, &l.a_target, ya) - span(&lp_b, &l.b_target, yb)).abs() < 1e-6);
    }
}
