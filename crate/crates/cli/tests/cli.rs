use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn stat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stat"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = stat(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CONFIG: &str = r#"{
  "data": {"seed": 1, "num_classes": 3, "num_train": 12, "num_eval": 6},
  "tokenizer": {"image_size": 8, "patch_size": 4, "hidden_dim": 8, "latent_len": 4,
                "code_dim": 4, "codebook_size": 16, "enc_layers": 1, "dec_layers": 1,
                "heads": 2, "prob_head_hidden": 8},
  "trainer": {"batch_size": 4, "stage1_steps": 4, "stage2_steps": 4, "warmup_steps": 1,
              "l_min": 2, "l_max": 4, "checkpoint_every": 2},
  "ar": {"hidden_dim": 8, "layers": 1, "heads": 2, "batch_size": 4, "steps": 3, "warmup_steps": 1}
}"#;

struct Run {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Run {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("config.json"), CONFIG).unwrap();
        Run { _dir: dir, root }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn unknown_config_key_exits_2_naming_the_key() {
    let run = Run::new();
    let cfg = run.p("bad.json");
    std::fs::write(&cfg, r#"{"trainer": {"foo": 3}}"#).unwrap();
    let out = stat(&["gen-data", "--config", s(&cfg), "--out", s(&run.p("imgs"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind=config"));
    assert!(err.contains("foo"), "{err}");
}

#[test]
fn usage_and_runtime_errors() {
    let out = stat(&["train-stage1", "--out", "x.stk"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error: kind=usage"));
    assert_eq!(stat(&["no-such-command"]).status.code(), Some(1));

    let run = Run::new();
    let out = stat(&[
        "eval",
        "--tokenizer",
        s(&run.p("missing.stk")),
        "--images",
        s(&run.root),
        "--out",
        s(&run.p("r.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: kind=runtime") && err.lines().count() == 1);

    let out = Command::new(env!("CARGO_BIN_EXE_stat"))
        .args([
            "gen-data",
            "--config",
            s(&run.p("config.json")),
            "--out",
            s(&run.p("i")),
        ])
        .env("STAT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_pipeline() {
    let run = Run::new();
    let cfg = run.p("config.json");
    let (train, eval) = (run.p("train"), run.p("eval"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&train)]);
    ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&eval),
        "--split",
        "eval",
    ]);
    let manifest = std::fs::read_to_string(train.join("manifest.csv")).unwrap();
    assert_eq!(
        manifest.lines().next().unwrap(),
        "id,label,detail_level,proxy_bytes"
    );
    assert_eq!(manifest.lines().count(), 13);

    let (s1, s2) = (run.p("s1.stk"), run.p("s2.stk"));
    ok(&[
        "train-stage1",
        "--config",
        s(&cfg),
        "--out",
        s(&s1),
        "--seed",
        "3",
    ]);
    ok(&[
        "train-stage2",
        "--config",
        s(&cfg),
        "--init",
        s(&s1),
        "--out",
        s(&s2),
        "--seed",
        "3",
    ]);
    let log = std::fs::read_to_string(run.p("s2.log.csv")).unwrap();
    assert!(log.starts_with("step,lr,total,recon,codebook,commit,content,decrease,sparse,mean_T\n"));
    assert_eq!(log.lines().count(), 5);

    // Same seed, same bytes.
    let s2b = run.p("s2b.stk");
    ok(&[
        "train-stage2",
        "--config",
        s(&cfg),
        "--init",
        s(&s1),
        "--out",
        s(&s2b),
        "--seed",
        "3",
    ]);
    assert_eq!(std::fs::read(&s2).unwrap(), std::fs::read(&s2b).unwrap());
    assert_eq!(log, std::fs::read_to_string(run.p("s2b.log.csv")).unwrap());

    let (t1, t2) = (run.p("t1.csv"), run.p("t2.csv"));
    for t in [&t1, &t2] {
        ok(&[
            "tokenize",
            "--tokenizer",
            s(&s2),
            "--images",
            s(&eval),
            "--policy",
            "threshold:0.5",
            "--out",
            s(t),
        ]);
    }
    let tokens = std::fs::read(&t1).unwrap();
    assert_eq!(tokens, std::fs::read(&t2).unwrap());
    let text = String::from_utf8(tokens).unwrap();
    assert!(text.starts_with("id,label,k,T,code_0,code_1,code_2,code_3,p_0,p_1,p_2,p_3\n"));
    assert_eq!(text.lines().count(), 7);

    let report = run.p("report.json");
    ok(&[
        "eval",
        "--tokenizer",
        s(&s2),
        "--images",
        s(&eval),
        "--policy",
        "expected:+0",
        "--out",
        s(&report),
        "--samples",
        s(&run.p("samples.csv")),
        "--compare",
        s(&run.p("cmp.csv")),
    ]);
    let json = std::fs::read_to_string(&report).unwrap();
    assert!(json.contains("\"pearson_tokens_vs_proxy\""));
    assert_eq!(
        std::fs::read_to_string(run.p("cmp.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    ok(&[
        "export-profiles",
        "--tokenizer",
        s(&s2),
        "--images",
        s(&eval),
        "--out",
        s(&run.p("prof.csv")),
    ]);
    let prof = std::fs::read_to_string(run.p("prof.csv")).unwrap();
    assert!(prof.starts_with("id,p_0,p_1,p_2,p_3\n"));

    ok(&[
        "reconstruct",
        "--tokenizer",
        s(&s2),
        "--images",
        s(&eval),
        "--policy",
        "fixed:2",
        "--out",
        s(&run.p("rec")),
    ]);
    assert_eq!(std::fs::read_dir(run.p("rec")).unwrap().count(), 7);

    let ar = run.p("ar.stk");
    ok(&[
        "train-ar",
        "--config",
        s(&cfg),
        "--tokenizer",
        s(&s2),
        "--out",
        s(&ar),
        "--seed",
        "1",
    ]);
    let gen = run.p("gen");
    ok(&[
        "generate",
        "--tokenizer",
        s(&s2),
        "--ar",
        s(&ar),
        "--class",
        "1",
        "--n",
        "3",
        "--out",
        s(&gen),
    ]);
    let dump = std::fs::read_to_string(gen.join("tokens.csv")).unwrap();
    assert_eq!(dump.lines().count(), 3);
    for line in dump.lines() {
        let f: Vec<&str> = line.split(',').collect();
        let k: usize = f[2].parse().unwrap();
        assert!((1..=4).contains(&k) && f.len() == 3 + k);
    }
}

#[test]
fn full_budget_reconstruction_matches_an_all_keep_threshold() {
    let run = Run::new();
    let cfg = run.p("config.json");
    let eval = run.p("eval");
    ok(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&eval),
        "--split",
        "eval",
    ]);
    let s1 = run.p("s1.stk");
    ok(&["train-stage1", "--config", s(&cfg), "--out", s(&s1)]);
    // A fresh probability head keeps every token at threshold 0.5.
    ok(&[
        "export-profiles",
        "--tokenizer",
        s(&s1),
        "--images",
        s(&eval),
        "--out",
        s(&run.p("p.csv")),
    ]);
    let prof = std::fs::read_to_string(run.p("p.csv")).unwrap();
    for line in prof.lines().skip(1) {
        assert!(line
            .split(',')
            .skip(1)
            .all(|v| v.parse::<f32>().unwrap() >= 0.5));
    }
    let (a, b) = (run.p("a"), run.p("b"));
    ok(&[
        "reconstruct",
        "--tokenizer",
        s(&s1),
        "--images",
        s(&eval),
        "--policy",
        "fixed:4",
        "--out",
        s(&a),
    ]);
    ok(&[
        "reconstruct",
        "--tokenizer",
        s(&s1),
        "--images",
        s(&eval),
        "--policy",
        "threshold:0.5",
        "--out",
        s(&b),
    ]);
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(
            std::fs::read(a.join(&n)).unwrap(),
            std::fs::read(b.join(&n)).unwrap()
        );
    }
}

#[test]
fn resume_continues_the_same_run() {
    let run = Run::new();
    let cfg = run.p("config.json");
    let full = run.p("full.stk");
    ok(&["train-stage1", "--config", s(&cfg), "--out", s(&full)]);

    // Stop after the first periodic checkpoint by running a shorter config.
    let short = run.p("short.json");
    std::fs::write(
        &short,
        CONFIG.replace("\"stage1_steps\": 4", "\"stage1_steps\": 2"),
    )
    .unwrap();
    let part = run.p("part.stk");
    ok(&["train-stage1", "--config", s(&short), "--out", s(&part)]);
    let err = stat(&[
        "train-stage1",
        "--config",
        s(&cfg),
        "--out",
        s(&part),
        "--resume",
    ]);
    assert!(
        err.status.success(),
        "{}",
        String::from_utf8_lossy(&err.stderr)
    );
    assert_eq!(
        std::fs::read_to_string(run.p("part.log.csv")).unwrap(),
        std::fs::read_to_string(run.p("full.log.csv")).unwrap()
    );
}
