use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_denoiserank");

fn run(args: &[&str], sets: &[String]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn base(dir: &Path) -> Vec<String> {
    let data = dir.join("data");
    let mut v = vec![
        format!("data_dir={}", data.display()),
        format!("out_dir={}", dir.join("run").display()),
        format!("train_file={}", data.join("train.txt").display()),
        format!("valid_file={}", data.join("valid.txt").display()),
        format!("test_file={}", data.join("test.txt").display()),
    ];
    v.extend(
        [
            "synth_queries=12",
            "synth_docs=8",
            "synth_k=5",
            "timesteps=20",
            "d_model=16",
            "heads=2",
            "blocks=1",
            "epochs=3",
            "batch_size=4",
            "eval_every=2",
            "eval_steps=4",
            "lr=0.01",
            "seed=3",
            "rsd_m=3",
            "reverse_steps=4",
        ]
        .map(String::from),
    );
    v
}

#[test]
fn full_pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let sets = base(dir.path());
    ok(&run(&["synth"], &sets));
    let summary = ok(&run(&["prepare"], &sets));
    assert!(summary.contains("k=5"), "{summary}");
    let cache = fs::read(dir.path().join("data/train.cache")).unwrap();
    ok(&run(&["prepare"], &sets));
    assert_eq!(fs::read(dir.path().join("data/train.cache")).unwrap(), cache);

    ok(&run(&["train"], &sets));
    let run_dir = dir.path().join("run");
    let log = fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(run_dir.join("best.ckpt").exists());
    let snapshot = fs::read_to_string(run_dir.join("train.config")).unwrap();
    assert!(snapshot.contains("epochs = 3"));

    let mut eval_sets = sets.clone();
    eval_sets.push("cutoffs=1,5,10".into());
    let table = ok(&run(&["evaluate"], &eval_sets));
    assert!(table.contains("ms/query"));
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("ndcg,")).count(), 3);
    ok(&run(&["evaluate"], &eval_sets));
    assert_eq!(fs::read_to_string(run_dir.join("metrics.csv")).unwrap(), csv);

    ok(&run(&["infer"], &sets));
    let scores = fs::read_to_string(run_dir.join("scores.tsv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 12 * 8);

    ok(&run(&["diversity"], &sets));
    let div = fs::read_to_string(run_dir.join("diversity.csv")).unwrap();
    assert!(div.starts_with("k,m,rsd,ndcg_mean,ndcg_single,n_queries\n1,3,"), "{div}");

    // the snapshot alone reproduces training
    let again = dir.path().join("again");
    let replay = run(
        &["train", "--config", run_dir.join("train.config").to_str().unwrap()],
        &[format!("out_dir={}", again.display())],
    );
    ok(&replay);
    assert_eq!(fs::read(again.join("best.ckpt")).unwrap(), fs::read(run_dir.join("best.ckpt")).unwrap());
    assert_eq!(fs::read_to_string(again.join("train_log.jsonl")).unwrap(), log);
}

#[test]
fn single_repetition_omits_rsd() {
    let dir = tempfile::tempdir().unwrap();
    let mut sets = base(dir.path());
    sets.push("epochs=1".into());
    ok(&run(&["synth"], &sets));
    ok(&run(&["prepare"], &sets));
    ok(&run(&["train"], &sets));
    sets.push("rsd_m=1".into());
    let out = ok(&run(&["diversity"], &sets));
    assert!(out.contains("--"), "{out}");
    let csv = fs::read_to_string(dir.path().join("run/diversity.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("")), "{csv}");
}

#[test]
fn web30k_shaped_input_reports_its_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.txt");
    let mut text = String::new();
    for q in 1..=3 {
        for d in 0..4 {
            let feats: Vec<String> = (1..=136).map(|f| format!("{f}:{}", (q * 7 + d * 3 + f) % 11)).collect();
            text.push_str(&format!("{} qid:{q} {}\n", (q + d) % 5, feats.join(" ")));
        }
    }
    fs::write(&path, text).unwrap();
    let out = ok(&run(
        &["prepare"],
        &[
            format!("train_file={}", path.display()),
            format!("data_dir={}", dir.path().join("data").display()),
        ],
    ));
    assert!(out.contains("k=136"), "{out}");
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let sets = base(dir.path());

    let bad_key = run(&["train"], &["no_such_key=1".into()]);
    assert_eq!(bad_key.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("no_such_key"));
    assert_eq!(run(&["train", "--preset", "nope"], &[]).status.code(), Some(2));

    // no caches yet: fails before any training output
    let missing = run(&["train"], &sets);
    assert_eq!(missing.status.code(), Some(3));
    assert!(!dir.path().join("run/train_log.jsonl").exists());

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = run(
        &["prepare"],
        &[
            format!("train_file={}", empty.display()),
            format!("data_dir={}", dir.path().join("d").display()),
        ],
    );
    assert_eq!(out.status.code(), Some(3));

    let broken = dir.path().join("broken.txt");
    fs::write(&broken, "1 qid:1 1:0.5\n2 qid:1 1:zz\n").unwrap();
    let out = run(
        &["prepare"],
        &[
            format!("train_file={}", broken.display()),
            format!("data_dir={}", dir.path().join("d").display()),
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2"), "{}", String::from_utf8_lossy(&out.stderr));

    // a checkpoint whose T is too short for the requested steps
    ok(&run(&["synth"], &sets));
    ok(&run(&["prepare"], &sets));
    ok(&run(&["train"], &sets));
    let mut too_many = sets.clone();
    too_many.push("reverse_steps=50".into());
    too_many.push("timesteps=100".into());
    assert_eq!(run(&["evaluate"], &too_many).status.code(), Some(2));
}

#[test]
fn keys_lists_the_schema() {
    let out = ok(&run(&["keys"], &[]));
    assert!(out.lines().any(|l| l.starts_with("timesteps")));
    assert_eq!(out.lines().count(), denoiserank_cli::config::SCHEMA.len());
}
