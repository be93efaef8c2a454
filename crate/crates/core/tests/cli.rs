//! The command-line contract: subcommands, output formats, config handling
//! and exit codes.

use std::path::Path;

use dvpnet::cli::{main_with, CONFIG_KEYS, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("dvpnet").chain(args.iter().copied()).map(String::from);
    let code = main_with(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_default_split() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out) = run(&["--set", "scene.image_size=96", "synth", "--count", "100", "--seed", "7", "--out", p(dir.path())]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(out.contains("80 train and 20 test"));
    let lines = |f: &str| std::fs::read_to_string(dir.path().join(f)).unwrap().lines().count();
    assert_eq!((lines("train.jsonl"), lines("test.jsonl")), (80, 20));
}

#[test]
fn pipeline_train_eval_infer_bench() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# small and quick\nscene.image_size = 96\nmodel.input_size = 96\nmodel.S = 3\ntrain.epochs = 1\ntrain.batch_size = 4\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let cfg_s = p(&cfg);
    assert_eq!(run(&["--config", cfg_s, "synth", "--count", "10", "--out", p(&data)]).0, EXIT_OK);
    let (code, out) = run(&["--config", cfg_s, "train", "--data", p(&data), "--out", p(&run_dir), "--workers", "2"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!(run_dir.join("train_log.csv").exists());
    assert!(run_dir.join("config.txt").exists());
    let ckpt = run_dir.join("final.ckpt");

    let ev = dir.path().join("eval");
    let (code, out) = run(&["eval", "--model", p(&ckpt), "--data", p(&data), "--out", p(&ev)]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "model,cov_ce_le_1,cov_ce_le_2,cov_ce_le_3,cov_ce_le_5");
    assert!(lines[1].starts_with("model,") && lines[2].starts_with("center,"));
    let records = std::fs::read_to_string(ev.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 2);

    let image = data.join("images/test/000008.png");
    let overlay = dir.path().join("o.png");
    let (code, out) = run(&["infer", "--model", p(&ckpt), "--image", p(&image), "--overlay", p(&overlay)]);
    assert_eq!(code, EXIT_OK);
    let fields: Vec<f64> = out.split_whitespace().map(|f| f.parse().unwrap()).collect();
    assert_eq!(fields.len(), 3);
    assert!((0.0..=1.0).contains(&fields[2]));
    assert!(overlay.exists());

    let (code, out) = run(&["bench", "--model", p(&ckpt), "--warmup", "1", "--reps", "10"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("median_ms,p5_ms,p95_ms,fps\n"));
}

#[test]
fn seeded_synth_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let args = ["--set", "scene.image_size=96", "synth", "--count", "4", "--seed", "3", "--out", p(d.path())];
        assert_eq!(run(&args).0, EXIT_OK);
    }
    for f in ["train.jsonl", "images/test/000003.png"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&[]).0, EXIT_USAGE);
    assert_eq!(run(&["frobnicate"]).0, EXIT_USAGE);
    assert_eq!(run(&["synth"]).0, EXIT_USAGE);
    assert_eq!(run(&["synth", "--out", "x", "--count", "many"]).0, EXIT_USAGE);
    assert_eq!(run(&["--set", "model.depth=3", "synth", "--out", "x"]).0, EXIT_USAGE);
    assert_eq!(run(&["--set", "model.S", "synth", "--out", "x"]).0, EXIT_USAGE);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.epochs = 2\ntrain.epoch = 3\n").unwrap();
    assert_eq!(run(&["--config", p(&cfg), "synth", "--out", "x"]).0, EXIT_USAGE);
    assert_eq!(run(&["ablate-scales", "--data", "x", "--subsets", "1;4"]).0, EXIT_USAGE);
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(run(&["eval", "--model", p(&missing), "--data", p(dir.path())]).0, EXIT_RUNTIME);
    assert_eq!(run(&["infer", "--model", p(&missing), "--image", "nope.png"]).0, EXIT_RUNTIME);
    assert_eq!(run(&["train", "--data", p(dir.path()), "--out", p(dir.path())]).0, EXIT_RUNTIME);
    assert_eq!(run(&["--set", "scene.image_size=4", "synth", "--out", p(dir.path())]).0, EXIT_RUNTIME);
}

#[test]
fn help_lists_every_key_with_default() {
    let (code, out) = run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for (k, _) in CONFIG_KEYS {
        let line = out.lines().find(|l| l.trim_start().starts_with(k)).unwrap_or_else(|| panic!("{k}"));
        assert!(line.split_whitespace().count() >= 3, "{line}");
    }
    for sub in ["synth", "train", "eval", "infer", "bench", "gradcheck", "ablate-s", "ablate-scales"] {
        assert!(out.contains(sub), "{sub}");
        assert_eq!(run(&[sub, "--help"]).0, EXIT_OK);
    }
}

#[test]
fn ablation_tables_have_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let small = ["--set", "scene.image_size=96", "--set", "model.input_size=96", "--set", "train.epochs=1", "--set", "train.batch_size=4"];
    let mut args = small.to_vec();
    args.extend(["synth", "--count", "10", "--out", p(&data)]);
    assert_eq!(run(&args).0, EXIT_OK);

    let mut args = small.to_vec();
    let out_csv = dir.path().join("s.csv");
    args.extend(["ablate-s", "--data", p(&data), "--values", "2,3", "--out", p(&out_csv)]);
    let (code, out) = run(&args);
    assert_eq!(code, EXIT_OK);
    assert_eq!(out.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(&out_csv).unwrap(), out);

    let mut args = small.to_vec();
    args.extend(["ablate-scales", "--data", p(&data), "--subsets", "1;1,2,3"]);
    let (code, out) = run(&args);
    assert_eq!(code, EXIT_OK);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("scales=1,"), "{}", rows[1]);
    assert!(rows[2].starts_with("scales=1+2+3,"), "{}", rows[2]);
}
