use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[net]
hidden = 8
blocks = 1
heads = 2
seq_len = 8

[train]
total_steps = 30
warmup_steps = 3
log_every = 10

[sample]
step_size = 0.05
n_trajectories = 20

[eval]
permutations = 20

[eval.classifier]
epochs = 20
"#;

fn kgsynth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgsynth")).args(args).output().unwrap()
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../example.config")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr_lines(out: &Output) -> Vec<String> {
    String::from_utf8_lossy(&out.stderr).lines().map(str::to_string).collect()
}

/// Every file under `root`, with manifests stripped of their wall time.
fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = fs::read(&p).unwrap();
            if rel.ends_with("manifest.json") {
                let text: String = String::from_utf8(bytes)
                    .unwrap()
                    .lines()
                    .filter(|l| !l.contains("wall_time_s"))
                    .collect::<Vec<_>>()
                    .join("\n");
                bytes = text.into_bytes();
            }
            files.push((rel, bytes));
        }
    }
    files.sort();
    files
}

#[test]
fn shipped_example_config_validates() {
    let path = example_config();
    let out = kgsynth(&["--config", path.to_str().unwrap(), "validate-config"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

#[test]
fn invalid_config_lists_every_violation_on_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[profile]\nlambda = 1.5\n[train]\npeak_lr = -1.0\n");
    let out = kgsynth(&["--config", &cfg, "validate-config"]);
    assert_eq!(out.status.code(), Some(2));
    let lines = stderr_lines(&out);
    assert_eq!(lines.len(), 1, "{lines:?}");
    assert!(lines[0].starts_with("error: config: "), "{}", lines[0]);
    assert!(lines[0].contains("lambda") && lines[0].contains("peak_lr"), "{}", lines[0]);
}

#[test]
fn unknown_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[profile]\nlamda = 0.2\n");
    let out = kgsynth(&["--config", &cfg, "validate-config"]);
    assert!(!out.status.success());
    assert_eq!(stderr_lines(&out).len(), 1);
}

#[test]
fn train_without_a_cohort_names_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = kgsynth(&["--out", out_dir.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(1));
    let lines = stderr_lines(&out);
    assert_eq!(lines.len(), 1, "{lines:?}");
    assert!(lines[0].starts_with("error: missing_artifact: "), "{}", lines[0]);
    assert!(lines[0].contains("`simulate`"), "{}", lines[0]);
}

#[test]
fn repeated_runs_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = kgsynth(&["--config", &cfg, "--out", a.to_str().unwrap(), "run"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let second = kgsynth(&["--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "1", "run"]);
    assert!(second.status.success());

    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.lines().all(|l| l.split_once('=').is_some_and(|(k, v)| !k.is_empty() && !v.is_empty())));
    assert!(stdout.lines().any(|l| l.starts_with("cat_mmd2=")));
    assert_eq!(first.stdout, second.stdout);

    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.iter().any(|(p, _)| p.ends_with("manifest.json")));
    assert_eq!(sa.len(), sb.len());
    for ((pa, ba), (pb, bb)) in sa.iter().zip(&sb) {
        assert_eq!(pa, pb);
        assert!(ba == bb, "{pa} differs between runs");
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let gen = |seed: &str, sub: &str| {
        let out_dir = dir.path().join(sub);
        let out = kgsynth(&["--config", &cfg, "--seed", seed, "--out", out_dir.to_str().unwrap(), "gen-kg"]);
        assert!(out.status.success());
        fs::read(out_dir.join("kg/edges.tsv")).unwrap()
    };
    assert_eq!(gen("3", "x"), gen("3", "y"));
    assert_ne!(gen("3", "x"), gen("4", "z"));
}
