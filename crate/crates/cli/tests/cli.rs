use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use attrib_eval::data::Method;
use attrib_eval::scorer::{
    AttributeRequest, ScoreRequest, Scorer, StdioScorer, SyntheticScorer, SyntheticScorerSpec,
};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_attrib-eval");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ATTRIB_EVAL_WORKERS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let mut args = vec![
        "synth",
        "--out",
        p(dir),
        "--num-instances",
        "60",
        "--seed",
        "3",
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    (dir.join("dataset.jsonl"), dir.join("scorer.json"))
}

fn write_config(dir: &Path, endpoint: &str, methods: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(
        &path,
        format!(
            "dataset = \"dataset.jsonl\"\nmethods = [{methods}]\ntraining_sizes = [8, 32]\nseeds = [0, 1]\n\
             output_dir = \"out\"\n[shapley]\nnum_permutations = 10\n[models.syn]\nendpoint = \"{endpoint}\"\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn synth_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), &["--rationale-prevalence", "0.3"]);
    synth(b.path(), &["--rationale-prevalence", "0.3"]);
    for f in ["dataset.jsonl", "scorer.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn synth_rejects_zero_prevalence_as_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "synth",
        "--out",
        p(dir.path()),
        "--rationale-prevalence",
        "0",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("prevalence"));
    assert!(!dir.path().join("dataset.jsonl").exists());
}

#[test]
fn synth_to_unwritable_path_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = run(&["synth", "--out", p(&blocker.join("sub"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unknown_flag_is_usage_error() {
    assert_eq!(code(&run(&["synth", "--bogus"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(
        code(&run(&["stats", "--records", "x", "--comparison", "nope"])),
        1
    );
}

#[test]
fn run_stats_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (_, scorer) = synth(dir.path(), &[]);
    let cfg = write_config(
        dir.path(),
        &format!("synthetic:{}", scorer.display()),
        "\"gold\", \"random\", \"shap\"",
    );
    let out = run(&["run", p(&cfg), "--workers", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out_dir = dir.path().join("out");
    assert_eq!(fs::read_dir(out_dir.join("runs")).unwrap().count(), 12);
    let summary = fs::read_to_string(out_dir.join("summary.tsv")).unwrap();
    assert!(summary.starts_with("paradigm\tmethod\ttraining_size\tn\t"));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), summary);

    let json = dir.path().join("stats.json");
    let out = run(&[
        "stats",
        "--records",
        p(&out_dir),
        "--comparison",
        "methods_pairwise",
        "--out",
        p(&json),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("gold(n=") && table.contains("random(n="));
    let reports: Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let report = &reports[0];
    let names: Vec<&str> = report["groups"]
        .as_array()
        .unwrap()
        .iter()
        .map(|g| g["name"].as_str().unwrap())
        .collect();
    let gi = names.iter().position(|n| *n == "gold").unwrap();
    let ri = names.iter().position(|n| *n == "random").unwrap();
    let pair = report["dunn"]["pairwise"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| {
            let (i, j) = (
                p["i"].as_u64().unwrap() as usize,
                p["j"].as_u64().unwrap() as usize,
            );
            (i, j) == (gi.min(ri), gi.max(ri))
        })
        .unwrap();
    assert!(pair["p_adjusted"].as_f64().unwrap() < 0.01, "{pair}");

    let plots = dir.path().join("plots");
    let out = run(&[
        "report",
        "--records",
        p(&out_dir),
        "--out",
        p(&plots),
        "--group-by",
        "method",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let plaus = fs::read_to_string(plots.join("plot_plausibility.tsv")).unwrap();
    assert_eq!(
        plaus.lines().next().unwrap(),
        "training_size\tgold/synthetic\trandom/synthetic\tshap/synthetic"
    );
    assert_eq!(plaus.lines().count(), 3);
    let gap = fs::read_to_string(plots.join("plot_faithfulness_gap.tsv")).unwrap();
    assert!(!gap.lines().next().unwrap().contains("gold"));
    assert!(fs::read_to_string(plots.join("summary.tsv"))
        .unwrap()
        .starts_with("method\tn\t"));

    // Rerun is a no-op with identical records.
    let before: Vec<Vec<u8>> = sorted_files(&out_dir.join("runs"));
    assert_eq!(code(&run(&["run", p(&cfg)])), 0);
    assert_eq!(before, sorted_files(&out_dir.join("runs")));
}

fn sorted_files(dir: &Path) -> Vec<Vec<u8>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}

#[test]
fn unreachable_endpoint_exits_3_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), &[]);
    let cfg = write_config(dir.path(), "http://127.0.0.1:9", "\"gold\"");
    let out = run(&["run", p(&cfg)]);
    assert_eq!(code(&out), 3);
    assert!(
        stderr(&out).contains("http://127.0.0.1:9"),
        "{}",
        stderr(&out)
    );

    let data = dir.path().join("dataset.jsonl");
    let out = run(&[
        "attribute",
        "--dataset",
        p(&data),
        "--method",
        "shap",
        "--endpoint",
        "http://127.0.0.1:9",
        "--out",
        p(&dir.path().join("a.jsonl")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("http://127.0.0.1:9"));
}

#[test]
fn invalid_config_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let (_, scorer) = synth(dir.path(), &[]);
    let cfg = write_config(
        dir.path(),
        &format!("synthetic:{}", scorer.display()),
        "\"gold\"",
    );
    let out = Command::new(BIN)
        .args(["run", p(&cfg)])
        .env("ATTRIB_EVAL_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert_eq!(code(&run(&["run", p(&dir.path().join("missing.toml"))])), 2);
    let out = run(&[
        "plausibility",
        "--dataset",
        p(&dir.path().join("nope.jsonl")),
        "--attributions",
        "x",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn single_step_commands_agree_with_each_other() {
    let dir = tempfile::tempdir().unwrap();
    let (data, scorer) = synth(dir.path(), &[]);
    let endpoint = format!("synthetic:{}", scorer.display());
    let gold = dir.path().join("gold.jsonl");
    let random = dir.path().join("random.jsonl");
    assert_eq!(
        code(&run(&[
            "attribute",
            "--dataset",
            p(&data),
            "--method",
            "gold",
            "--out",
            p(&gold)
        ])),
        0
    );
    assert_eq!(
        code(&run(&[
            "attribute",
            "--dataset",
            p(&data),
            "--method",
            "random",
            "--seed",
            "2",
            "--out",
            p(&random)
        ])),
        0
    );

    let out = run(&[
        "plausibility",
        "--dataset",
        p(&data),
        "--attributions",
        p(&gold),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mean"], 1.0);

    let curve = |file: &Path| {
        let out = run(&[
            "faithfulness",
            "--dataset",
            p(&data),
            "--attributions",
            p(file),
            "--endpoint",
            &endpoint,
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        serde_json::from_slice::<Value>(&out.stdout).unwrap()["auc_normalized"]
            .as_f64()
            .unwrap()
    };
    assert!(curve(&gold) < curve(&random));

    let out = run(&["baseline", "--dataset", p(&data), "--trials", "20"]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["mean"].as_f64().unwrap() > 0.2 && v["mean"].as_f64().unwrap() < 0.6);

    // subsample needs a training split; the file name decides the split.
    let train = dir.path().join("train.jsonl");
    fs::copy(&data, &train).unwrap();
    let small = dir.path().join("small.jsonl");
    let out = run(&[
        "subsample",
        "--dataset",
        p(&train),
        "--size",
        "8",
        "--seed",
        "1",
        "--out",
        p(&small),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read_to_string(&small).unwrap().lines().count(), 8);
    assert_eq!(
        code(&run(&[
            "subsample",
            "--dataset",
            p(&data),
            "--size",
            "8",
            "--out",
            p(&small)
        ])),
        2
    );
}

fn local_scorer(spec: &Path) -> SyntheticScorer {
    SyntheticScorer::new(SyntheticScorerSpec::load(spec).unwrap()).unwrap()
}

#[test]
fn stdio_server_conforms() {
    let dir = tempfile::tempdir().unwrap();
    let (_, spec) = synth(dir.path(), &[]);
    let local = local_scorer(&spec);
    let remote = StdioScorer::spawn(
        BIN,
        &[
            "serve".into(),
            "--stdio".into(),
            "--spec".into(),
            p(&spec).into(),
        ],
    )
    .unwrap();
    assert_eq!(remote.info().unwrap(), local.info().unwrap());

    let tokens: Vec<String> = ["w0001", "w0002", "w0100", "w0150"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let reqs: Vec<ScoreRequest> = (0..5)
        .map(|i| ScoreRequest::new(format!("q{i}"), tokens.clone(), vec![0; 4], vec![i]))
        .collect();
    assert_eq!(
        remote.score(&reqs[0]).unwrap(),
        local.score(&reqs[0]).unwrap()
    );
    let batch = remote.score_batch(&reqs).unwrap();
    assert_eq!(batch.len(), reqs.len());
    for (i, (got, req)) in batch.into_iter().zip(&reqs).enumerate() {
        if i < 4 {
            assert_eq!(got.unwrap(), local.score(req).unwrap());
        } else {
            assert!(got.is_err(), "mask position 4 is out of range");
        }
    }
    let attr = |method| AttributeRequest {
        request_id: "a".into(),
        tokens: tokens.clone(),
        segment_ids: vec![0; 4],
        method,
        target: None,
        ig_steps: 50,
    };
    assert_eq!(
        remote.attribute(&attr(Method::Ig)).unwrap(),
        local.attribute(&attr(Method::Ig)).unwrap()
    );
    assert!(matches!(
        remote.attribute(&attr(Method::Shap)),
        Err(attrib_eval::scorer::ScorerError::Unsupported(_))
    ));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_http(spec: &Path) -> (Server, String) {
    let mut child = Command::new(BIN)
        .args(["serve", "--spec", p(spec), "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();
    (Server(child), url)
}

#[test]
fn endpoints_of_every_kind_give_identical_attributions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, spec) = synth(dir.path(), &[]);
    let (_server, url) = spawn_http(&spec);
    let endpoints = [
        format!("synthetic:{}", spec.display()),
        url,
        format!("stdio:{BIN} serve --stdio --spec {}", spec.display()),
    ];
    let mut outputs = Vec::new();
    for (i, e) in endpoints.iter().enumerate() {
        let out_path = dir.path().join(format!("shap{i}.jsonl"));
        let out = run(&[
            "attribute",
            "--dataset",
            p(&data),
            "--method",
            "shap",
            "--permutations",
            "8",
            "--endpoint",
            e,
            "--model-id",
            "m",
            "--workers",
            "2",
            "--out",
            p(&out_path),
        ]);
        assert_eq!(code(&out), 0, "{e}: {}", stderr(&out));
        outputs.push(fs::read(&out_path).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn help_documents_every_flag() {
    let cases: &[(&str, &[&str])] = &[
        (
            "synth",
            &[
                "--num-instances",
                "--vocab-size",
                "--rationale-prevalence",
                "--num-labels",
                "--seed",
                "--out",
            ],
        ),
        (
            "attribute",
            &[
                "--dataset",
                "--label-set",
                "--endpoint",
                "--timeout",
                "--workers",
                "--method",
                "--seed",
                "--permutations",
                "--model-id",
                "--out",
            ],
        ),
        (
            "plausibility",
            &[
                "--dataset",
                "--label-set",
                "--attributions",
                "--abs",
                "--out",
            ],
        ),
        (
            "faithfulness",
            &[
                "--dataset",
                "--label-set",
                "--endpoint",
                "--timeout",
                "--workers",
                "--attributions",
                "--thresholds",
                "--out",
            ],
        ),
        (
            "stats",
            &[
                "--records",
                "--comparison",
                "--metric",
                "--adjustment",
                "--sizes",
                "--out",
            ],
        ),
        ("run", &["--workers", "<CONFIG>"]),
        ("report", &["--records", "--out", "--group-by"]),
        (
            "baseline",
            &["--dataset", "--label-set", "--trials", "--seed"],
        ),
        (
            "subsample",
            &[
                "--dataset",
                "--label-set",
                "--size",
                "--seed",
                "--allow-partial-coverage",
                "--out",
            ],
        ),
        ("serve", &["--spec", "--addr", "--stdio", "--threads"]),
    ];
    for (cmd, flags) in cases {
        let out = run(&[cmd, "--help"]);
        assert_eq!(code(&out), 0, "{cmd}");
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
    let out = run(&["--help"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for (cmd, _) in cases {
        assert!(text.contains(cmd));
    }
    assert!(String::from_utf8(run(&["run", "--help"]).stdout)
        .unwrap()
        .contains("ATTRIB_EVAL_WORKERS"));
}
