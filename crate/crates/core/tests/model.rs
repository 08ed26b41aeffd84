use tda_core::gradcheck;
use tda_core::nn::{repeat_memory, BoundParams, Dropout, FeatureBatch, Model, ModelConfig, ParamStore, TokenBatch};
use tda_core::objective::{batch_loss, build_dual_layouts, DualBatch, Objective};
use tda_core::rng::rng;
use tda_core::testing::tiny_config;
use tda_core::vocab::{EOS, PAD, TO_SRC, TO_TGT};
use tda_core::{Tape, Tensor};

use rand::Rng as _;

fn features(frames: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let data = (0..frames * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::new(&[frames, dim], data).unwrap()
}

fn dual_batch(vocab: usize, feat_dim: usize) -> DualBatch<f64> {
    let f1 = features(9, feat_dim, 1);
    let f2 = features(14, feat_dim, 2);
    DualBatch {
        features: FeatureBatch::from_examples(&[&f1, &f2]).unwrap(),
        layouts: vec![
            build_dual_layouts(&[5, 6], &[7], vocab).unwrap(),
            build_dual_layouts(&[6, 6, 5], &[8, 7], vocab).unwrap(),
        ],
    }
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        dropout: 0.1,
        max_positions: 64,
        ..ModelConfig::toy(9)
    };
    let model = Model::new(cfg.clone()).unwrap();
    let store = ParamStore::<f64>::init(&cfg, 11).unwrap();
    let batch = dual_batch(cfg.vocab_size, cfg.feat_dim);
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    let inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    // a few elements of every parameter tensor
    let mut pick = rng(5);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| (0..3).map(|_| pick.random_range(0..t.numel())).collect())
        .collect();
    let tokens = batch.dual_tokens() as f64;
    let report = gradcheck::check(&inputs, Some(&coords), 1e-4, |tape: &mut Tape<f64>, vars| {
        let bound = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let mut r = rng(99);
        let mut dropout = Dropout::new(0.1, &mut r);
        let loss = batch_loss(
            tape,
            &model,
            &bound,
            &batch,
            Objective::Dual { lambda: 1.0 },
            0.1,
            &mut dropout,
        )?;
        Ok::<_, tda_core::ObjectiveError>(tape.scale(loss.total, 1.0 / tokens).unwrap())
    })
    .unwrap();
    assert!(report.checked >= 3 * names.len());
    assert!(report.max_rel_error < 1e-4, "{report:?} at {}", names[report.worst.0]);
}

#[test]
fn decoder_is_causal_and_encoder_ignores_padding() {
    let cfg = tiny_config(10);
    let model = Model::new(cfg.clone()).unwrap();
    let store = ParamStore::<f64>::init(&cfg, 3).unwrap();
    let short = features(7, cfg.feat_dim, 4);
    let long = features(16, cfg.feat_dim, 5);

    let run = |batch: &FeatureBatch<f64>, rows: &[&[u32]]| {
        let mut tape = Tape::new();
        let p = BoundParams::bind(&mut tape, &store, false);
        let mem = model.encode(&mut tape, &p, batch, &mut Dropout::disabled()).unwrap();
        let states = tape.value(mem.states).clone();
        let lp = model
            .decode(
                &mut tape,
                &p,
                &mem,
                &TokenBatch::from_rows(rows, PAD),
                &mut Dropout::disabled(),
            )
            .unwrap();
        (states, tape.value(lp).clone(), mem.frames, mem.lengths)
    };

    let alone = FeatureBatch::from_examples(&[&short]).unwrap();
    let mut padded = FeatureBatch::from_examples(&[&short, &long]).unwrap();
    let (s1, lp1, _, len1) = run(&alone, &[&[TO_SRC, 5, 6, TO_TGT]]);
    let (s2, lp2, frames2, _) = run(&padded, &[&[TO_SRC, 5, 6, TO_TGT], &[TO_SRC, 7]]);
    // scribble over the padding region of the short example
    let dim = cfg.feat_dim;
    for x in &mut padded.features.data_mut()[7 * dim..16 * dim] {
        *x = 123.0;
    }
    let (s3, _, _, _) = run(&padded, &[&[TO_SRC, 5, 6, TO_TGT], &[TO_SRC, 7]]);
    let d = cfg.d_model;
    for t in 0..len1[0] {
        for k in 0..d {
            assert!((s1.data()[t * d + k] - s2.data()[t * d + k]).abs() < 1e-10);
            assert!((s2.data()[t * d + k] - s3.data()[t * d + k]).abs() < 1e-12);
        }
    }
    assert_eq!(frames2, cfg.subsampled_len(16));
    let v = cfg.vocab_size;
    assert_eq!(lp1.shape(), &[4, v]);
    assert_eq!(lp2.shape(), &[8, v]);
    for (a, b) in lp1.data().iter().zip(&lp2.data()[..4 * v]) {
        assert!((a - b).abs() < 1e-10);
    }

    // changing later tokens leaves earlier positions alone
    let mut r = rng(8);
    for _ in 0..20 {
        let seq: Vec<u32> = (0..6).map(|_| r.random_range(0..v as u32)).collect();
        let cut = r.random_range(1..6);
        let mut other = seq.clone();
        for x in &mut other[cut..] {
            *x = r.random_range(0..v as u32);
        }
        let (_, a, _, _) = run(&alone, &[&seq]);
        let (_, b, _, _) = run(&alone, &[&other]);
        assert_eq!(&a.data()[..cut * v], &b.data()[..cut * v]);
    }
}

#[test]
fn sequence_probabilities_are_normalized() {
    // vocab 6 leaves one content token; every length-6 sequence is enumerated
    let cfg = tiny_config(6);
    let v = cfg.vocab_size;
    let model = Model::new(cfg.clone()).unwrap();
    let store = ParamStore::<f64>::init(&cfg, 21).unwrap();
    let feats = features(10, cfg.feat_dim, 6);
    let mut tape = Tape::new();
    let p = BoundParams::bind(&mut tape, &store, false);
    let batch = FeatureBatch::from_examples(&[&feats]).unwrap();
    let mem = model.encode(&mut tape, &p, &batch, &mut Dropout::disabled()).unwrap();

    let mut prefixes: Vec<(Vec<u32>, f64)> = vec![(vec![TO_SRC], 0.0)];
    for _ in 0..6 {
        let mark = tape.len();
        let rows: Vec<&[u32]> = prefixes.iter().map(|(t, _)| t.as_slice()).collect();
        let n = rows.len();
        let m = repeat_memory(&mut tape, &mem, &[n]).unwrap();
        let lp = model
            .decode(
                &mut tape,
                &p,
                &m,
                &TokenBatch::from_rows(&rows, PAD),
                &mut Dropout::disabled(),
            )
            .unwrap();
        let len = rows[0].len();
        let data = tape.value(lp).data().to_vec();
        let mut next = Vec::with_capacity(n * v);
        for (b, (toks, lp_prefix)) in prefixes.iter().enumerate() {
            let row = &data[(b * len + len - 1) * v..(b * len + len) * v];
            let mass: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((mass - 1.0).abs() < 1e-6);
            for (tok, &l) in row.iter().enumerate() {
                let mut t = toks.clone();
                t.push(tok as u32);
                next.push((t, lp_prefix + l));
            }
        }
        tape.truncate(mark);
        prefixes = next;
    }
    let total: f64 = prefixes.iter().map(|(_, l)| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-6, "{total}");
    // sequences with the dual layout shape [z1 z2 <2tgt> y1 y2 </s>]
    let shaped: f64 = prefixes
        .iter()
        .filter(|(t, _)| {
            t[3] == TO_TGT && t[6] == EOS && t[1..].iter().enumerate().all(|(i, &x)| matches!(i, 2 | 5) || x >= 5)
        })
        .map(|(_, l)| l.exp())
        .sum();
    assert!(shaped <= 1.0 && shaped > 0.0);
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny_config(10);
    let model = Model::new(cfg.clone()).unwrap();
    let store = ParamStore::<f32>::init(&cfg, 3).unwrap();
    let batch = dual_batch(10, cfg.feat_dim).cast::<f32>();
    let once = || {
        let mut tape = Tape::<f32>::new();
        let p = BoundParams::bind(&mut tape, &store, true);
        let mut r = rng(4);
        let mut drop = Dropout::new(0.3, &mut r);
        let loss = batch_loss(
            &mut tape,
            &model,
            &p,
            &batch,
            Objective::Dual { lambda: 1.0 },
            0.1,
            &mut drop,
        )
        .unwrap();
        tape.backward(loss.total).unwrap();
        (loss.sums, p.grads(&tape))
    };
    assert_eq!(once(), once());
}
