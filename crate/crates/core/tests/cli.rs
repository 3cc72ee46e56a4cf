use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cmvae");

fn cmvae(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("CMVAE_DATA").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cmvae(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_synth(dir: &Path) -> String {
    ok(&["synth", "--data", dir.to_str().unwrap(), "--music", "40", "--videos", "800", "--clusters", "5", "--dim", "8", "--seed", "7"])
}

#[test]
fn synth_is_deterministic_and_reports_stats() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let out_a = small_synth(a.path());
    small_synth(b.path());
    assert!(out_a.contains("n_music=40 n_videos=800 mean_videos_per_music=20.00"), "{out_a}");
    for f in ["music.cmft", "visual.cmft", "textual.cmft", "pairs.tsv", "popularity.tsv"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn synth_errors_map_to_exit_codes() {
    let out = cmvae(&["synth", "--data", "/definitely/not/here"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/definitely/not/here"));

    let dir = tempfile::tempdir().unwrap();
    let out = cmvae(&["synth", "--data", dir.path().to_str().unwrap(), "--clusters", "500", "--music", "200"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(cmvae(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cmvae(&["--help"]).status.code(), Some(0));
}

#[test]
fn split_prints_invariant_checks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    small_synth(dir.path());
    let weak = ok(&["split", "--data", d, "--mode", "weak", "--seed", "1"]);
    assert!(weak.contains("test music ⊆ train music: OK"), "{weak}");
    let first = std::fs::read(dir.path().join("split.tsv")).unwrap();
    ok(&["split", "--data", d, "--mode", "weak", "--seed", "1"]);
    assert_eq!(first, std::fs::read(dir.path().join("split.tsv")).unwrap());

    let strong_path = dir.path().join("strong.tsv");
    let strong = ok(&["split", "--data", d, "--mode", "strong", "--strata", "3", "--split", strong_path.to_str().unwrap()]);
    assert!(strong.contains("train∩test music: 0"), "{strong}");
}

#[test]
fn train_eval_recommend_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    small_synth(dir.path());
    ok(&["split", "--data", d, "--seed", "2"]);
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "# tiny run\nlatent_dim=8\nhidden=16\nbatch_size=64\nmax_epochs=3\n").unwrap();
    let conf = conf.to_str().unwrap();
    let train = ok(&["--config", conf, "train", "--data", d, "--seed", "4"]);
    assert!(train.contains("best epoch"), "{train}");
    assert!(dir.path().join("model.ckpt.log.jsonl").exists());

    let eval = ok(&["eval", "--data", d, "--k", "5,10"]);
    assert!(eval.contains("method=cmvae K=10"), "{eval}");
    assert!(eval.contains("method=popular"), "{eval}");
    let records = std::fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 6);

    let rec = ok(&["recommend", "--data", d, "--video", "v000123", "--k", "5"]);
    let scores: Vec<f64> = rec
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 5);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let dropped = ok(&["recommend", "--data", d, "--video", "v000123", "--k", "5", "--drop-textual"]);
    assert!(dropped.contains("via visual "), "{dropped}");
    let eval_drop = ok(&["eval", "--data", d, "--drop-textual", "--report", dir.path().join("drop.txt").to_str().unwrap()]);
    assert!(eval_drop.contains("modalities=visual\n") || eval_drop.contains("modalities=visual "), "{eval_drop}");

    let missing = cmvae(&["recommend", "--data", d, "--video", "nope"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn data_path_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["synth", "--music", "20", "--videos", "200", "--clusters", "4", "--dim", "4"])
        .env("CMVAE_DATA", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("pairs.tsv").exists());
}

#[test]
fn config_file_errors_are_config_failures() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "learning_rate=fast\n").unwrap();
    let out = cmvae(&["--config", conf.to_str().unwrap(), "train", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}
