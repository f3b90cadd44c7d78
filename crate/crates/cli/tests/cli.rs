use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn adaptkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptkit")).args(args).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--batch-size", "8"];
    if !extra.contains(&"--steps") {
        args.extend(["--steps", "20"]);
    }
    args.extend_from_slice(extra);
    adaptkit(&args)
}

#[test]
fn adapter_mode_without_a_name_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--adapter-name"));
    assert_eq!(adaptkit(&["train", "--steps", "many"]).status.code(), Some(1));
    assert_eq!(adaptkit(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn same_seed_gives_the_same_metric_and_package() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = train(&a, &["--adapter-name", "maj", "--seed", "5"]);
    let rb = train(&b, &["--adapter-name", "maj", "--seed", "5"]);
    assert_eq!(ra.status.code(), Some(0), "{}", stderr(&ra));
    assert_eq!(stdout_json(&ra)["dev_metric"], stdout_json(&rb)["dev_metric"]);
    assert_eq!(fs::read(a.join("adapter.pkg")).unwrap(), fs::read(b.join("adapter.pkg")).unwrap());
    assert!(a.join("train_log.jsonl").is_file() && a.join("dev.tsv").is_file());
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.yaml");
    fs::write(&cfg, "adapter_name: from-file\ntask: copy-first-label\nadapter_config: houlsby\nreduction_factor: 32\n").unwrap();
    let out = train(&dir.path().join("r"), &["--config", cfg.to_str().unwrap(), "--task", "majority-token"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let summary = stdout_json(&out);
    assert_eq!(summary["adapter"], "from-file");
    assert_eq!(summary["task"], "majority-token");
}

#[test]
fn run_against_a_mismatched_checkpoint_reports_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let desk = dir.path().join("desk");
    let trained = train(&desk, &["--adapter-name", "maj"]);
    let desk_hash = stdout_json(&trained)["model_hash"].as_str().unwrap().to_string();
    let small = dir.path().join("small.txt");
    fs::write(
        &small,
        "model_type=mini-bert\nhidden_size=32\nnum_layers=2\nnum_heads=4\nffn_size=64\nvocab_size=128\nmax_seq_len=32\nlayer_norm_epsilon=1e-12\n",
    )
    .unwrap();
    let other = dir.path().join("other");
    let full = train(&other, &["--model-config", small.to_str().unwrap(), "--mode", "full_finetune", "--steps", "1"]);
    let other_hash = stdout_json(&full)["model_hash"].as_str().unwrap().to_string();
    assert!(full.status.success());

    let out = adaptkit(&[
        "run",
        "--model-checkpoint",
        other.join("backbone.ckpt").to_str().unwrap(),
        "--adapter",
        desk.join("adapter.pkg").to_str().unwrap(),
        "--input-file",
        desk.join("dev.tsv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains(&desk_hash) && err.contains(&other_hash), "{err}");
}

#[test]
fn validate_names_the_missing_field() {
    let dir = tempfile::tempdir().unwrap();
    let meta = dir.path().join("m.yaml");
    fs::write(
        &meta,
        format!(
            "id: x\ntype: text_task\ncategory: c\ndataset: d\nmodel_type: mini-bert\nmodel_hash: {0}\nconfig_hash: {0}\nconfig: pfeiffer\nurl: file:///x.zip\n",
            "a".repeat(64)
        ),
    )
    .unwrap();
    let out = adaptkit(&["validate", meta.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("sha256"));
    let missing = adaptkit(&["validate", dir.path().join("nope.yaml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
}

/// Train and publish two adapters, returning the index path and the model hash.
fn published_hub(dir: &Path) -> (String, String) {
    let mut hash = String::new();
    for (name, task) in [("sst-2", "majority-token"), ("stsb", "copy-first-label")] {
        let run = dir.join(name);
        let out = train(&run, &["--adapter-name", name, "--task", task, "--steps", "2"]);
        assert!(out.status.success(), "{}", stderr(&out));
        hash = stdout_json(&out)["model_hash"].as_str().unwrap().to_string();
        let zip = dir.join("hub").join(format!("{name}.zip"));
        fs::create_dir_all(zip.parent().unwrap()).unwrap();
        let packed = adaptkit(&[
            "pack",
            "--package",
            run.join("adapter.pkg").to_str().unwrap(),
            "--out",
            zip.to_str().unwrap(),
            "--category",
            "toy",
            "--dataset",
            task,
        ]);
        assert!(packed.status.success(), "{}", stderr(&packed));
    }
    let index = dir.join("index.json");
    let built = adaptkit(&["index", dir.join("hub").to_str().unwrap(), "--out", index.to_str().unwrap()]);
    assert!(built.status.success(), "{}", stderr(&built));
    (index.to_str().unwrap().to_string(), hash)
}

#[test]
fn search_and_explore_over_a_published_index() {
    let dir = tempfile::tempdir().unwrap();
    let (index, hash) = published_hub(dir.path());

    let tree = adaptkit(&["explore", "--index", &index]);
    assert!(tree.status.success());
    let text = String::from_utf8_lossy(&tree.stdout);
    assert!(text.contains("task") && text.contains("sst-2") && text.contains("stsb"));
    assert_eq!(adaptkit(&["explore", "--index", &index, "--level1", "planets"]).status.code(), Some(1));

    let found = adaptkit(&["search", "--index", &index, "--query", "sst", "--model-hash", &hash]);
    assert!(found.status.success(), "{}", stderr(&found));
    assert_eq!(stdout_json(&found)["id"], "sst-2");

    let ambiguous = adaptkit(&["search", "--index", &index, "--query", "s", "--model-hash", &hash]);
    assert_eq!(ambiguous.status.code(), Some(2));
    let err = stderr(&ambiguous);
    assert!(err.contains("sst-2") && err.contains("stsb"), "{err}");

    let other = "0".repeat(64);
    let wrong_model = adaptkit(&["search", "--index", &index, "--query", "sst", "--model-hash", &other]);
    assert_eq!(wrong_model.status.code(), Some(2));

    let no_index = adaptkit(&["search", "--index", "/no/such/index.json", "--query", "sst", "--model-hash", &hash]);
    assert_eq!(no_index.status.code(), Some(3));
}

#[test]
fn run_resolves_through_the_index_into_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (index, _) = published_hub(dir.path());
    let cache = dir.path().join("cache");
    let run = |query: &str| {
        Command::new(env!("CARGO_BIN_EXE_adaptkit"))
            .env("ADAPTKIT_CACHE", &cache)
            .args([
                "run",
                "--model-checkpoint",
                dir.path().join("sst-2/backbone.ckpt").to_str().unwrap(),
                "--adapter",
                query,
                "--index",
                &index,
                "--input-file",
                dir.path().join("sst-2/dev.tsv").to_str().unwrap(),
            ])
            .output()
            .unwrap()
    };
    let out = run("sst");
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 400);
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
    assert_eq!(run("s").status.code(), Some(2));
}
