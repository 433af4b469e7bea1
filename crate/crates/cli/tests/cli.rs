use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use loopvox::audio::{encode_wav, AudioClip};

fn loopvox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopvox"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = loopvox(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files.extend(tree(&path));
        } else {
            files.push((path.strip_prefix(dir).unwrap_or(&path).display().to_string(), fs::read(&path).unwrap()));
        }
    }
    files.sort();
    files
}

#[test]
fn synth_writes_320_entries_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let stdout = ok(&["synth", "--speakers", "8", "--utts", "40", "--seed", "7", "--out", p(out)]);
        assert!(stdout.contains("320 utterances"), "{stdout}");
    }
    let manifest = fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 321);
    assert!(tree(&a) == tree(&b), "reruns differ");
}

#[test]
fn synth_rejects_a_single_speaker() {
    let dir = tempfile::tempdir().unwrap();
    let out = loopvox(&["synth", "--speakers", "1", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("num_speakers"));
}

#[test]
fn train_without_cache_explains_how_to_build_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--speakers", "2", "--utts", "7", "--out", p(&data)]);
    let out = loopvox(&[
        "train",
        "--manifest",
        p(&data.join("manifest.tsv")),
        "--cache",
        p(&dir.path().join("nowhere")),
        "--run-dir",
        p(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("loopvox preprocess"));
}

#[test]
fn bad_flags_and_missing_files_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = loopvox(&["identify", "--checkpoint", p(&dir.path().join("none.vpck")), "--wav", "x.wav"]);
    assert_eq!(out.status.code(), Some(1));
    let out = loopvox(&["preprocess", "--manifest", "m.tsv", "--cache", "c", "--loss", "hinge"]);
    assert_eq!(out.status.code(), Some(2));
    let out = loopvox(&["preprocess", "--manifest", "m.tsv", "--cache", "c", "--set", "lr0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let manifest = data.join("manifest.tsv");
    let cache = d.join("cache");
    ok(&["synth", "--speakers", "3", "--utts", "14", "--min-dur", "1.5", "--max-dur", "2.5", "--seed", "1", "--out", p(&data)]);

    let flags = ["--geometry", "224x224x3", "--duration", "2"];
    let pre = |args: &[&str]| ok(&[&["preprocess", "--manifest", p(&manifest), "--cache", p(&cache)], args].concat());
    assert!(pre(&flags).starts_with("written 42\tfresh 0"));
    assert!(pre(&flags).starts_with("written 0\tfresh 42"));
    let sizes: Vec<u64> = tree(&cache)
        .iter()
        .filter(|(name, _)| name.ends_with(".vpft"))
        .map(|(_, bytes)| bytes.len() as u64)
        .collect();
    assert_eq!(sizes.len(), 42);
    assert!(sizes.iter().all(|&s| s == sizes[0]));

    let train = |run: &str| {
        let run_dir = d.join(run);
        let args = [
            "train", "--manifest", p(&manifest), "--cache", p(&cache), "--run-dir", p(&run_dir), "--net", "tiny",
            "--loss", "cosface", "--margin", "0.2", "--scale", "22", "--lr0", "0.003", "--batch-size", "8",
            "--min-epochs", "20", "--max-epochs", "20", "--seed", "3",
        ];
        ok(&[&args[..], &flags].concat());
        run_dir
    };
    let (a, b) = (train("run_a"), train("run_b"));
    assert!(tree(&a) == tree(&b), "identical flags gave different run directories");
    let log = fs::read_to_string(a.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 20);
    let config = fs::read_to_string(a.join("config.txt")).unwrap();
    for line in ["loss=cosface", "scale=22", "margin=0.2", "seed=3", "net_preset=tiny", "geometry=224x224"] {
        assert!(config.lines().any(|l| l == line), "config snapshot lacks {line}");
    }
    // the snapshot is a valid config file on its own
    ok(&["preprocess", "--manifest", p(&manifest), "--cache", p(&cache), "--config", p(&a.join("config.txt"))]);

    let ck = a.join("checkpoint.vpck");
    let report = d.join("report.tsv");
    let stdout = ok(&["eval", "--checkpoint", p(&ck), "--manifest", p(&manifest), "--cache", p(&cache), "--out", p(&report)]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "loss\tgeometry\tduration_s\ttop1_classifier\ttop1_cosine\tintra_cos\tinter_cos");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("cosface\t224x224\t2\t"));
    assert_eq!(fs::read_to_string(&report).unwrap(), stdout);
    assert!(d.join("report.confusion.tsv").is_file());

    let m = fs::read_to_string(&manifest).unwrap();
    let row = m.lines().skip(1).find(|l| l.split('\t').nth(2) == Some("train")).unwrap();
    let fields: Vec<&str> = row.split('\t').collect();
    let stdout = ok(&["identify", "--checkpoint", p(&ck), "--wav", p(&data.join(fields[1]))]);
    assert_eq!(stdout.split('\t').next(), Some(fields[0]));

    let silent = d.join("silent.wav");
    fs::write(&silent, encode_wav(&AudioClip::new(vec![0.0; 16_000], 16_000, "s").unwrap()).unwrap()).unwrap();
    let out = loopvox(&["identify", "--checkpoint", p(&ck), "--wav", p(&silent)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no voiced frames"));
}
