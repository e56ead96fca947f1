use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

use capctl_core::captioner::{Captioner, CaptionerConfig, Direction};
use capctl_core::checkpoint::Checkpoint;
use capctl_core::corpus::{Dataset, EOS};
use capctl_core::rng::stream;
use capctl_core::trainer::TrainLog;

const SMALL: [&str; 8] = [
    "--set",
    "captioner.hidden=24",
    "--set",
    "captioner.proj_dim=24",
    "--set",
    "captioner.att_dim=12",
    "--set",
    "captioner.embed_dim=16",
];

fn capctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capctl"))
        .args(args)
        .env_remove("CAPCTL_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(
        code(&o),
        0,
        "stdout: {}\nstderr: {}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_hash(dir: &Path) -> String {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().as_encoded_bytes());
        h.update(fs::read(&p).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn gen(dir: &TempDir, scenes: usize) -> PathBuf {
    let out = dir.path().join("data");
    ok(capctl(&[
        "gen-data",
        "--out",
        s(&out),
        "--scenes",
        &scenes.to_string(),
        "--seed",
        "7",
    ]));
    out
}

fn train_args(data: &Path, ckpt: &Path, extra: &[&str], small: bool) -> Output {
    let mut args = vec!["train", "--data", s(data), "--ckpt", s(ckpt)];
    args.extend_from_slice(extra);
    if small {
        args.extend_from_slice(&SMALL);
    }
    capctl(&args)
}

fn train(data: &Path, ckpt: &Path, extra: &[&str]) -> Output {
    train_args(data, ckpt, extra, true)
}

#[test]
fn gen_data_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(capctl(&[
            "gen-data",
            "--out",
            s(d),
            "--scenes",
            "100",
            "--seed",
            "7",
        ]));
    }
    assert_eq!(tree_hash(&a), tree_hash(&b));
    let data = Dataset::load(&a).unwrap();
    assert_eq!(
        (data.train.len(), data.val.len(), data.test.len()),
        (80, 10, 10)
    );
    for f in [
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "vocab.txt",
        "idf.json",
        "config.txt",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn gen_data_usage_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(
        code(&capctl(&[
            "gen-data",
            "--out",
            s(&dir.path().join("z")),
            "--scenes",
            "0"
        ])),
        2
    );
    let data = gen(&dir, 30);
    let again = capctl(&[
        "gen-data",
        "--out",
        s(&data),
        "--scenes",
        "30",
        "--seed",
        "7",
    ]);
    assert_eq!(code(&again), 2);
    ok(capctl(&[
        "gen-data",
        "--out",
        s(&data),
        "--scenes",
        "30",
        "--seed",
        "7",
        "--force",
    ]));
    assert_eq!(
        code(&capctl(&[
            "gen-data",
            "--out",
            s(&data),
            "--set",
            "corpus.colour=3",
            "--force"
        ])),
        2
    );
    assert_eq!(code(&capctl(&["gen-data"])), 2);
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "corpus.seed = 3\ncorpus.feat_dim = 16\n").unwrap();
    let out = dir.path().join("d");
    ok(capctl(&[
        "gen-data",
        "--out",
        s(&out),
        "--scenes",
        "20",
        "--config",
        s(&cfg),
        "--seed",
        "5",
    ]));
    let data = Dataset::load(&out).unwrap();
    assert_eq!(data.config.seed, 5);
    assert_eq!(data.config.feat_dim, 16);
    fs::write(&cfg, "corpus.bogus = 1\n").unwrap();
    let o = capctl(&[
        "gen-data",
        "--out",
        s(&dir.path().join("e")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_checkpoint_log_and_config() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, 40);
    let fwd = dir.path().join("fwd.ckpt");
    ok(train(&data, &fwd, &["--control", "multi", "--epochs", "2"]));
    let ck = Checkpoint::load(&fwd).unwrap();
    assert_eq!(ck.meta_u64("meta/beta_dim").unwrap(), 4);
    assert_eq!(ck.meta_u64("meta/direction").unwrap(), 0);
    let log = TrainLog::from_jsonl(&fs::read_to_string(dir.path().join("fwd.log.jsonl")).unwrap())
        .unwrap();
    assert_eq!(log.records.len(), 2);
    let cfg = fs::read_to_string(dir.path().join("fwd.config.txt")).unwrap();
    assert!(cfg.contains("captioner.hidden = 24") && cfg.contains("train.epochs = 2"));

    let bwd = dir.path().join("bwd.ckpt");
    ok(train(
        &data,
        &bwd,
        &[
            "--control",
            "quality",
            "--direction",
            "bwd",
            "--epochs",
            "1",
        ],
    ));
    assert_eq!(
        Checkpoint::load(&bwd)
            .unwrap()
            .meta_u64("meta/direction")
            .unwrap(),
        1
    );
}

#[test]
fn training_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, 30);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    for p in [&a, &b] {
        ok(train(
            &data,
            p,
            &["--control", "length", "--epochs", "2", "--seed", "11"],
        ));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn scst_needs_init_and_matching_vocabulary() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, 30);
    let xe = dir.path().join("xe.ckpt");
    let sc = dir.path().join("sc.ckpt");
    assert_eq!(
        code(&train(
            &data,
            &sc,
            &["--control", "quality", "--mode", "scst"]
        )),
        2
    );
    ok(train(
        &data,
        &xe,
        &["--control", "quality", "--epochs", "1"],
    ));
    let o = ok(train(
        &data,
        &sc,
        &[
            "--control",
            "quality",
            "--mode",
            "scst",
            "--init",
            s(&xe),
            "--epochs",
            "1",
            "--beta",
            "4",
        ],
    ));
    assert!(stdout(&o).contains("reward"));
    let log = TrainLog::from_jsonl(&fs::read_to_string(dir.path().join("sc.log.jsonl")).unwrap())
        .unwrap();
    assert!(log.records[0].mean_reward.is_some());
    assert_eq!(
        code(&train(
            &data,
            &sc,
            &["--control", "length", "--mode", "scst", "--init", s(&xe)]
        )),
        2
    );

    // same corpus with one extra word: different vocabulary
    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    for e in fs::read_dir(&data).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, other.join(p.file_name().unwrap())).unwrap();
    }
    let mut vocab = fs::read_to_string(other.join("vocab.txt")).unwrap();
    vocab.push_str("zebra\n");
    fs::write(other.join("vocab.txt"), vocab).unwrap();
    let o = train(
        &other,
        &sc,
        &[
            "--control",
            "quality",
            "--mode",
            "scst",
            "--init",
            s(&xe),
            "--epochs",
            "1",
        ],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn caption_and_eval_end_to_end() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, 100);
    let (fwd, bwd, m) = (
        dir.path().join("f.ckpt"),
        dir.path().join("b.ckpt"),
        dir.path().join("m.ckpt"),
    );
    let fast = [
        "--control",
        "quality",
        "--epochs",
        "12",
        "--set",
        "train.lr=0.003",
    ];
    ok(train_args(&data, &fwd, &fast, false));
    ok(train_args(
        &data,
        &bwd,
        &[&fast[..], &["--direction", "bwd"]].concat(),
        false,
    ));
    let o = ok(capctl(&[
        "train-matcher",
        "--data",
        s(&data),
        "--fwd",
        s(&fwd),
        "--bwd",
        s(&bwd),
        "--out",
        s(&m),
        "--epochs",
        "2",
    ]));
    assert!(stdout(&o).contains("caption pairs"));
    let log =
        TrainLog::from_jsonl(&fs::read_to_string(dir.path().join("m.log.jsonl")).unwrap()).unwrap();
    assert_eq!(log.records.len(), 2);

    let base = [
        "caption",
        "--ckpt",
        s(&fwd),
        "--data",
        s(&data),
        "--scene",
        "36",
        "--beta",
        "4",
    ];
    let plain = stdout(&ok(capctl(&base)));
    assert_eq!(plain.lines().count(), 1);
    let mut beam1 = base.to_vec();
    beam1.extend(["--beam", "1"]);
    assert_eq!(stdout(&ok(capctl(&beam1))), plain);

    let mut sel = base.to_vec();
    sel.extend(["--bwd", s(&bwd), "--matcher", s(&m), "--verbose"]);
    let out = stdout(&ok(capctl(&sel)));
    let lines: Vec<&str> = out.lines().collect();
    let chosen = lines[0];
    let candidates: Vec<String> = lines[1..3]
        .iter()
        .map(|l| l.split_whitespace().skip(2).collect::<Vec<_>>().join(" "))
        .collect();
    assert!(candidates.iter().any(|c| c == chosen), "{out}");

    let mut bad = base.to_vec();
    bad[8] = "4,1";
    assert_eq!(code(&capctl(&bad)), 2);
    let mut missing = base.to_vec();
    missing[6] = "9999";
    assert_eq!(code(&capctl(&missing)), 3);

    let report = dir.path().join("r.json");
    ok(capctl(&[
        "eval",
        "--data",
        s(&data),
        "--fwd",
        s(&fwd),
        "--report",
        s(&report),
        "--beta",
        "4",
    ]));
    let plain: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let keys: Vec<&String> = plain.as_object().unwrap().keys().collect();
    assert_eq!(
        keys,
        [
            "bleu1",
            "bleu4",
            "cider",
            "compliance",
            "poor_quality_fraction"
        ]
    );
    let csv = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "scene_id,caption,cider,selected_source"
    );
    assert_eq!(csv.lines().count(), 11);

    let sweep = dir.path().join("s.json");
    ok(capctl(&[
        "eval",
        "--data",
        s(&data),
        "--fwd",
        s(&fwd),
        "--report",
        s(&sweep),
        "--beta-sweep",
        "4",
    ]));
    let sw: serde_json::Value = serde_json::from_str(&fs::read_to_string(&sweep).unwrap()).unwrap();
    assert_eq!(sw[0]["report"], plain);

    let withm = dir.path().join("m.json");
    ok(capctl(&[
        "eval",
        "--data",
        s(&data),
        "--fwd",
        s(&fwd),
        "--bwd",
        s(&bwd),
        "--matcher",
        s(&m),
        "--report",
        s(&withm),
    ]));
    let conflict = capctl(&[
        "eval",
        "--data",
        s(&data),
        "--fwd",
        s(&fwd),
        "--report",
        s(&withm),
        "--beta-sweep",
        "1,2",
        "--control-study",
        "length=7..9",
    ]);
    assert_eq!(code(&conflict), 2);
}

#[test]
fn control_study_report() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, 30);
    let fwd = dir.path().join("f.ckpt");
    ok(train(
        &data,
        &fwd,
        &["--control", "length", "--epochs", "1"],
    ));
    let report = dir.path().join("study.json");
    ok(capctl(&[
        "eval",
        "--data",
        s(&data),
        "--fwd",
        s(&fwd),
        "--report",
        s(&report),
        "--control-study",
        "length=7..9",
    ]));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert_eq!(v[0]["requested"], 7.0);
    let bad = capctl(&[
        "eval",
        "--data",
        s(&data),
        "--fwd",
        s(&fwd),
        "--report",
        s(&report),
        "--control-study",
        "tense=1..2",
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn matcher_without_pairs_is_an_empty_result() {
    let dir = TempDir::new().unwrap();
    let data = gen(&dir, 20);
    let ds = Dataset::load(&data).unwrap();
    // models that end every caption immediately leave nothing to compare
    let silent = |direction: Direction, path: &Path| {
        let cfg = CaptionerConfig {
            direction,
            ..CaptionerConfig::desk(ds.config.feat_dim, ds.vocab.len())
        };
        let mut m = Captioner::<f32>::new(cfg, &mut stream(1, "init")).unwrap();
        let ids: Vec<_> = m.params().iter().map(|(id, _, _)| id).collect();
        for id in ids {
            m.params_mut()
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        let bias = m.params().require("captioner/out/bias").unwrap();
        m.params_mut().get_mut(bias).data_mut()[EOS] = 1.0;
        m.to_checkpoint(ds.vocab.hash())
            .unwrap()
            .save(path)
            .unwrap();
    };
    let (f, b) = (dir.path().join("f.ckpt"), dir.path().join("b.ckpt"));
    silent(Direction::Forward, &f);
    silent(Direction::Backward, &b);
    let o = capctl(&[
        "train-matcher",
        "--data",
        s(&data),
        "--fwd",
        s(&f),
        "--bwd",
        s(&b),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&o), 4);
    let swapped = capctl(&[
        "train-matcher",
        "--data",
        s(&data),
        "--fwd",
        s(&b),
        "--bwd",
        s(&f),
        "--out",
        s(&dir.path().join("m.ckpt")),
    ]);
    assert_eq!(code(&swapped), 3);
}

#[test]
fn grad_check_table_and_fault_injection() {
    let o = ok(capctl(&["grad-check", "--seed", "1"]));
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r.ends_with("PASS")));
    for name in [
        "matmul",
        "softmax",
        "lstm_cell",
        "gru_cell",
        "concat",
        "captioner_xe",
        "matcher_triplet",
    ] {
        assert!(out.contains(name), "{name}");
    }
    let bad = capctl(&["grad-check", "--corrupt-scale", "1.1"]);
    assert_ne!(code(&bad), 0);
    assert!(stdout(&bad).contains("FAIL"));
}
