use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tda::corpus::Corpus;
use tda::formats::{load_checkpoint, parse_report};
use tda_core::data::Split;

fn tda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tda"))
        .current_dir(dir)
        .env_remove("TDA_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = tda(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Relative path to file contents, for every file under `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const TINY: &[&str] = &[
    "--set",
    "d_model=16",
    "--set",
    "ffn_dim=32",
    "--set",
    "heads=2",
    "--set",
    "enc_layers=1",
    "--set",
    "dec_layers=1",
    "--set",
    "max_steps=6",
    "--set",
    "checkpoint_every=3",
    "--set",
    "token_budget=400",
    "--set",
    "warmup_steps=4",
    "--quiet",
];

fn train_args<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--corpus", "corpus", "--out", out];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_data_layout_reproducibility_and_safety() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "a", "--n", "2000", "--seed", "7"]);
    ok(d, &["gen-data", "--out", "b", "--n", "2000", "--seed", "7"]);
    assert_eq!(tree(&d.join("a")), tree(&d.join("b")));
    let lines = |s: &str| fs::read_to_string(d.join("a").join(s)).unwrap().lines().count();
    assert_eq!(
        (lines("train.tsv"), lines("dev.tsv"), lines("test.tsv")),
        (1800, 100, 100)
    );

    let again = tda(d, &["gen-data", "--out", "a", "--n", "2000", "--seed", "7"]);
    assert_eq!(code(&again), 3);
    ok(d, &["gen-data", "--out", "a", "--n", "2000", "--seed", "7", "--force"]);

    let seeded = Command::new(env!("CARGO_BIN_EXE_tda"))
        .current_dir(d)
        .env("TDA_SEED", "7")
        .args(["gen-data", "--out", "env", "--n", "2000"])
        .output()
        .unwrap();
    assert!(seeded.status.success());
    assert_eq!(tree(&d.join("env")), tree(&d.join("b")));

    assert_eq!(code(&tda(d, &["gen-data", "--out", "z", "--n", "0"])), 2);
    assert_eq!(code(&tda(d, &["gen-data", "--bogus"])), 2);
}

#[test]
fn feature_files_match_synthetic_features() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "syn", "--n", "60", "--seed", "2"]);
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "files",
            "--n",
            "60",
            "--seed",
            "2",
            "--write-features",
        ],
    );
    let manifest = fs::read_to_string(d.join("files/dev.tsv")).unwrap();
    assert!(manifest
        .lines()
        .all(|l| l.split('\t').nth(2).unwrap().starts_with("features/")));
    for split in Split::ALL {
        let a = Corpus::open(&d.join("syn")).unwrap().examples(split).unwrap();
        let b = Corpus::open(&d.join("files")).unwrap().examples(split).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn training_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "corpus",
            "--n",
            "200",
            "--seed",
            "3",
            "--max-words",
            "2",
        ],
    );

    // missing corpus is a configuration error naming the file
    let missing = tda(d, &["train", "--corpus", "nowhere", "--out", "x"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere/corpus.conf"));
    assert_eq!(code(&tda(d, &train_args("train", "x", &["--set", "nope=1"]))), 2);
    assert_eq!(code(&tda(d, &train_args("train", "x", &["--lambda", "-1"]))), 2);

    ok(d, &train_args("train", "l0", &["--lambda", "0"]));
    ok(d, &train_args("train", "mle", &["--mode", "train-mle-only"]));
    ok(d, &train_args("train", "l0again", &["--lambda", "0"]));
    ok(d, &train_args("train", "l1", &["--lambda", "1"]));
    let metrics = |r: &str| fs::read(d.join(r).join("metrics.tsv")).unwrap();
    assert_eq!(metrics("l0"), metrics("mle"));
    assert_ne!(metrics("l0"), metrics("l1"));
    assert_eq!(tree(&d.join("l0")), tree(&d.join("l0again")));
    assert_eq!(String::from_utf8(metrics("l1")).unwrap().lines().count(), 3);
    let run = fs::read_to_string(d.join("l1/run.conf")).unwrap();
    assert!(run.contains("lambda=1\n") && run.contains("d_model=16\n") && run.contains("mode=train-tda\n"));
    assert_eq!(code(&tda(d, &train_args("train", "l1", &[]))), 3);

    // decode then evaluate, along both single paths
    for (path, metric) in [("st", "bleu"), ("asr", "wer")] {
        let out = format!("{path}.tsv");
        let report = format!("{path}.report");
        ok(
            d,
            &[
                "decode",
                "--checkpoint",
                "l1/last.ckpt",
                "--corpus",
                "corpus",
                "--path",
                path,
                "--out",
                &out,
                "--set",
                "beam_size=2",
            ],
        );
        ok(
            d,
            &["evaluate", "--decoded", &out, "--corpus", "corpus", "--out", &report],
        );
        let (kv, rows) = parse_report(&fs::read_to_string(d.join(&report)).unwrap());
        let v: f64 = kv[metric].parse().unwrap();
        assert!(v.is_finite() && v >= 0.0);
        assert_eq!(rows.len(), 1 + 10);
        assert!(d.join(format!("{out}.conf")).exists());
        ok(
            d,
            &[
                "decode",
                "--checkpoint",
                "l1/last.ckpt",
                "--corpus",
                "corpus",
                "--path",
                path,
                "--out",
                "again.tsv",
                "--set",
                "beam_size=2",
                "--force",
            ],
        );
        assert_eq!(fs::read(d.join(&out)).unwrap(), fs::read(d.join("again.tsv")).unwrap());
    }
    ok(
        d,
        &[
            "decode",
            "--checkpoint",
            "l1/last.ckpt",
            "--corpus",
            "corpus",
            "--path",
            "full-st-bt",
            "--out",
            "full.tsv",
        ],
    );
    ok(
        d,
        &[
            "evaluate",
            "--decoded",
            "full.tsv",
            "--corpus",
            "corpus",
            "--out",
            "full.report",
        ],
    );
    let (kv, _) = parse_report(&fs::read_to_string(d.join("full.report")).unwrap());
    assert!(kv.contains_key("bleu") && kv.contains_key("wer"));

    // agreement reports for both runs share one layout
    ok(
        d,
        &[
            "agreement",
            "--checkpoint",
            "l0/last.ckpt",
            "--corpus",
            "corpus",
            "--out",
            "a0.report",
        ],
    );
    ok(
        d,
        &[
            "agreement",
            "--checkpoint",
            "l1/last.ckpt",
            "--corpus",
            "corpus",
            "--out",
            "a1.report",
        ],
    );
    let (k0, r0) = parse_report(&fs::read_to_string(d.join("a0.report")).unwrap());
    let (k1, r1) = parse_report(&fs::read_to_string(d.join("a1.report")).unwrap());
    assert_eq!(k0.keys().collect::<Vec<_>>(), k1.keys().collect::<Vec<_>>());
    assert_eq!(r0[0], r1[0]);
    assert_eq!(r0.len(), 11);

    // averaging one checkpoint reproduces its parameters
    ok(d, &["average-checkpoints", "--out", "one.ckpt", "l1/last.ckpt"]);
    assert_eq!(
        load_checkpoint(&d.join("one.ckpt")).unwrap().params,
        load_checkpoint(&d.join("l1/last.ckpt")).unwrap().params
    );
    ok(
        d,
        &[
            "average-checkpoints",
            "--out",
            "two.ckpt",
            "l1/checkpoints/step-00000003.ckpt",
            "l1/last.ckpt",
        ],
    );
    assert_eq!(
        code(&tda(d, &["average-checkpoints", "--out", "two.ckpt", "l1/last.ckpt"])),
        3
    );

    // version mismatch
    let mut bytes = fs::read(d.join("l1/last.ckpt")).unwrap();
    bytes[8] = 99;
    fs::write(d.join("future.ckpt"), bytes).unwrap();
    let v = tda(
        d,
        &[
            "decode",
            "--checkpoint",
            "future.ckpt",
            "--corpus",
            "corpus",
            "--out",
            "f.tsv",
        ],
    );
    assert_eq!(code(&v), 5);
    assert_eq!(
        code(&tda(d, &["average-checkpoints", "--out", "f.ckpt", "future.ckpt"])),
        5
    );
}

#[test]
fn pretraining_initializes_the_encoder() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "corpus",
            "--n",
            "120",
            "--seed",
            "4",
            "--max-words",
            "2",
        ],
    );
    ok(d, &train_args("pretrain-asr", "asr", &[]));
    let metrics = fs::read_to_string(d.join("asr/metrics.tsv")).unwrap();
    let first: Vec<&str> = metrics.lines().next().unwrap().split('\t').collect();
    assert_eq!(first[2..5], ["0", "0", "0"]);
    assert_eq!(
        code(&tda(d, &train_args("pretrain-asr", "y", &["--mode", "train-tda"]))),
        2
    );

    ok(
        d,
        &train_args(
            "train",
            "ft",
            &["--init-from", "asr/last.ckpt", "--lambda", "0", "--set", "seed=9"],
        ),
    );
    let pre = load_checkpoint(&d.join("asr/last.ckpt")).unwrap();
    let start = load_checkpoint(&d.join("ft/checkpoints/step-00000000.ckpt")).unwrap();
    for (name, t) in pre.params.iter().filter(|(n, _)| !n.starts_with("dec.")) {
        assert_eq!(start.params.get(name), Some(t), "{name}");
    }
    assert_ne!(start.params.get("dec.embed"), pre.params.get("dec.embed"));
    ok(
        d,
        &train_args(
            "train",
            "ft2",
            &["--init-from", "asr/last.ckpt", "--set", "init_decoder=true"],
        ),
    );
    let start = load_checkpoint(&d.join("ft2/checkpoints/step-00000000.ckpt")).unwrap();
    assert_eq!(start.params, pre.params);
}

#[test]
fn divergence_exits_with_code_four() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "corpus",
            "--n",
            "60",
            "--seed",
            "5",
            "--max-words",
            "1",
        ],
    );
    let out = tda(
        d,
        &train_args("train", "run", &["--set", "peak_lr=1e30", "--set", "warmup_steps=1"]),
    );
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("run/checkpoints/step-00000000.ckpt").exists());
    assert!(d.join("run/metrics.tsv").exists());
}
