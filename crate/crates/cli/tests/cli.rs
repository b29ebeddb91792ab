//! End-to-end runs of the command-line tool on small corpora.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sulcal-ssl"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, name: &str, n: &str, extra: &[&str]) {
    let mut args = vec!["synth", "--out", name, "--n", n, "--seed", "5"];
    args.extend_from_slice(extra);
    let out = run(dir, &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "a", "12", &[]);
    synth(tmp.path(), "b", "12", &[]);
    let manifest = fs::read(tmp.path().join("a/manifest.csv")).unwrap();
    assert_eq!(
        manifest,
        fs::read(tmp.path().join("b/manifest.csv")).unwrap()
    );
    for entry in fs::read_dir(tmp.path().join("a/crops")).unwrap() {
        let entry = entry.unwrap();
        let other = tmp.path().join("b/crops").join(entry.file_name());
        assert_eq!(fs::read(entry.path()).unwrap(), fs::read(other).unwrap());
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["synth", "--n", "4"])), 2);
    assert_eq!(code(&run(tmp.path(), &["train", "--bogus"])), 2);
    assert_eq!(
        code(&run(
            tmp.path(),
            &["train", "--corpus", "c", "--epochs", "1"]
        )),
        2
    );
    assert_eq!(code(&run(tmp.path(), &["frobnicate"])), 2);
    fs::write(
        tmp.path().join("bad.json"),
        r#"{"train": {"learning_rate": 1}}"#,
    )
    .unwrap();
    assert_eq!(
        code(&run(
            tmp.path(),
            &["train", "--config", "bad.json", "--out", "o"]
        )),
        2
    );
    assert_eq!(
        code(&run(
            tmp.path(),
            &["gridsearch", "--corpus", "c", "--out", "o"]
        )),
        2,
        "an empty grid is a usage error"
    );
}

#[test]
fn runtime_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = run(
        tmp.path(),
        &[
            "train", "--corpus", "nowhere", "--out", "o", "--epochs", "1",
        ],
    );
    assert_eq!(code(&missing), 1);

    synth(tmp.path(), "corpus", "24", &[]);
    let out = run(
        tmp.path(),
        &[
            "train",
            "--corpus",
            "corpus",
            "--out",
            "runs",
            "--epochs",
            "1",
            "--batch-size",
            "8",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    synth(tmp.path(), "single", "12", &["--prevalence", "0"]);
    let out = run(
        tmp.path(),
        &[
            "probe",
            "--corpus",
            "single",
            "--embeddings",
            "runs/seed-0/embeddings.csv",
        ],
    );
    assert_eq!(code(&out), 1, "a one-class probe cannot be fitted");
    assert!(String::from_utf8_lossy(&out.stderr).contains("class"));
}

#[test]
fn train_embed_probe_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "corpus", "24", &[]);
    let train = [
        "train",
        "--corpus",
        "corpus",
        "--out",
        "runs",
        "--epochs",
        "2",
        "--batch-size",
        "8",
    ];
    assert_eq!(code(&run(tmp.path(), &train)), 0);
    let dir = tmp.path().join("runs/seed-0");
    for f in [
        "run.json",
        "checkpoint.sslf",
        "loss.csv",
        "embeddings.csv",
        "report.json",
    ] {
        assert!(dir.join(f).exists(), "{f} missing");
    }
    let loss = fs::read_to_string(dir.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    let embed = [
        "embed",
        "--corpus",
        "corpus",
        "--checkpoint",
        "runs/seed-0/checkpoint.sslf",
        "--out",
        "e.csv",
    ];
    assert_eq!(code(&run(tmp.path(), &embed)), 0);
    assert_eq!(
        fs::read(tmp.path().join("e.csv")).unwrap(),
        fs::read(dir.join("embeddings.csv")).unwrap()
    );

    let probe = [
        "probe",
        "--corpus",
        "corpus",
        "--embeddings",
        "e.csv",
        "--split-out",
        "split.csv",
        "--out",
        "p.json",
    ];
    assert_eq!(code(&run(tmp.path(), &probe)), 0);
    assert_eq!(
        fs::read(tmp.path().join("p.json")).unwrap(),
        fs::read(dir.join("report.json")).unwrap()
    );
    let reuse = [
        "probe",
        "--corpus",
        "corpus",
        "--embeddings",
        "e.csv",
        "--split",
        "split.csv",
        "--out",
        "q.json",
    ];
    assert_eq!(code(&run(tmp.path(), &reuse)), 0);
    assert_eq!(
        fs::read(tmp.path().join("q.json")).unwrap(),
        fs::read(tmp.path().join("p.json")).unwrap()
    );

    // Retraining the same configuration reproduces the checkpoint bytes.
    let again = [
        "train",
        "--corpus",
        "corpus",
        "--out",
        "again",
        "--epochs",
        "2",
        "--batch-size",
        "8",
    ];
    let out = Command::new(env!("CARGO_BIN_EXE_sulcal-ssl"))
        .current_dir(tmp.path())
        .env("SULCAL_SSL_THREADS", "3")
        .args(again)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(dir.join("checkpoint.sslf")).unwrap(),
        fs::read(tmp.path().join("again/seed-0/checkpoint.sslf")).unwrap()
    );
}

#[test]
fn gridsearch_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "corpus", "24", &[]);
    let grid = [
        "gridsearch",
        "--corpus",
        "corpus",
        "--out",
        "g",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--grid-latent-dim",
        "4,6",
        "--repeats",
        "2",
    ];
    assert_eq!(code(&run(tmp.path(), &grid)), 0);
    let results = tmp.path().join("g/grid/results.csv");
    let first = fs::read_to_string(&results).unwrap();
    let rows: Vec<&str> = first.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("cell_id,repeat,seed,"));
    assert!(rows[1].starts_with("c000-r0,0,0,"));
    assert!(rows[4].starts_with("c001-r1,1,1,"));

    // Drop one finished cell; the rerun trains only that one and ends with
    // the same table.
    let cell = tmp.path().join("g/grid/cells/c001-r0");
    let checkpoint = fs::read(cell.join("checkpoint.sslf")).unwrap();
    fs::remove_file(cell.join("report.json")).unwrap();
    let stamp = fs::metadata(tmp.path().join("g/grid/cells/c000-r0/checkpoint.sslf"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(code(&run(tmp.path(), &grid)), 0);
    assert_eq!(fs::read_to_string(&results).unwrap(), first);
    assert_eq!(fs::read(cell.join("checkpoint.sslf")).unwrap(), checkpoint);
    let after = fs::metadata(tmp.path().join("g/grid/cells/c000-r0/checkpoint.sslf"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(stamp, after, "finished cells are not retrained");
}
