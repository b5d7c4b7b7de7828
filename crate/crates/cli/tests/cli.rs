use std::path::Path;

use surgidepth::depthdata::{load_dataset, read_depth};
use surgidepth_cli::report::ReportRecord;
use surgidepth_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["surgidepth"];
    argv.extend_from_slice(args);
    run(argv)
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn records(dir: &Path) -> Vec<ReportRecord> {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn unknown_command_and_bad_flags_are_usage_errors() {
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["synth", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(cli(&["synth", "--n", "3"]), EXIT_USAGE); // no --out
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn eval_identical_dirs_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["synth", "--n", "4", "--size", "16x24", "--out", &p(d.path(), "gt")]), EXIT_OK);
    let gt = p(d.path(), "gt");
    assert_eq!(cli(&["eval", "--pred", &gt, "--gt", &gt, "--out", &p(d.path(), "rep")]), EXIT_OK);
    let rep = d.path().join("rep");
    let r = &records(&rep)[0];
    assert_eq!((r.abs_rel, r.delta1, r.n_frames), (0.0, 1.0, 4));
    let md = std::fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(md.contains("| gt | 0.000 / 1.000 |"), "{md}");
    for f in ["report.csv", "frames.csv", "resolved_config.toml"] {
        assert!(rep.join(f).exists(), "{f}");
    }
}

#[test]
fn synth_is_deterministic_and_png16_works() {
    let d = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        assert_eq!(cli(&["synth", "--n", "32", "--primitive", "ramp", "--seed", "7", "--out", &p(d.path(), name)]), 0);
    }
    for entry in std::fs::read_dir(d.path().join("a/depth")).unwrap() {
        let f = entry.unwrap().file_name();
        assert_eq!(
            std::fs::read(d.path().join("a/depth").join(&f)).unwrap(),
            std::fs::read(d.path().join("b/depth").join(&f)).unwrap()
        );
    }
    assert_eq!(
        std::fs::read(d.path().join("a/manifest.csv")).unwrap(),
        std::fs::read(d.path().join("b/manifest.csv")).unwrap()
    );
    let out = p(d.path(), "png");
    assert_eq!(cli(&["synth", "--n", "2", "--size", "8x8", "--depth-format", "png16", "--out", &out]), 0);
    let data = load_dataset(&out).unwrap();
    assert!(data[0].depth.values().iter().all(|v| *v > 0.4));
}

#[test]
fn env_seed_is_a_fallback_only() {
    let d = tempfile::tempdir().unwrap();
    let synth = |extra: &[&str], out: &str| {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_surgidepth"))
            .args(["synth", "--n", "1", "--size", "8x8", "--out", &p(d.path(), out)])
            .args(extra)
            .env(surgidepth_cli::SEED_ENV, "11")
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
    };
    synth(&[], "env");
    synth(&["--seed", "11"], "flag");
    synth(&["--seed", "12"], "other");
    let load = |n: &str| load_dataset(d.path().join(n)).unwrap();
    assert_eq!(load("env"), load("flag"));
    assert_ne!(load("env"), load("other"));
    let resolved = std::fs::read_to_string(d.path().join("env/resolved_config.toml")).unwrap();
    assert!(resolved.contains("seed = 11"), "{resolved}");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "[synth]\nn = 3\nsize = \"8x12\"\nseed = 5\n").unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    assert_eq!(cli(&["synth", "--config", &cfg, "--n", "2", "--out", &p(d.path(), "o")]), 0);
    let data = load_dataset(d.path().join("o")).unwrap();
    assert_eq!(data.len(), 2);
    assert_eq!(data[0].shape(), (8, 12));

    std::fs::write(d.path().join("bad.toml"), "[synth]\nnumber = 3\n").unwrap();
    assert_eq!(cli(&["synth", "--config", &p(d.path(), "bad.toml"), "--out", &p(d.path(), "x")]), EXIT_USAGE);
}

#[test]
fn missing_inputs_are_data_errors() {
    let d = tempfile::tempdir().unwrap();
    let nowhere = p(d.path(), "nowhere");
    assert_eq!(cli(&["finetune", "--data", &nowhere, "--out", &p(d.path(), "o")]), EXIT_DATA);
    assert_eq!(cli(&["eval", "--pred", &nowhere, "--gt", &nowhere, "--out", &p(d.path(), "e")]), EXIT_DATA);
    assert_eq!(cli(&["render", "--depth", &p(d.path(), "x.pfm"), "--out", &p(d.path(), "r")]), EXIT_DATA);
}

#[test]
fn invalid_settings_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let out = p(d.path(), "o");
    assert_eq!(cli(&["finetune", "--data", "x", "--lr=-1", "--out", &out]), EXIT_USAGE);
    assert_eq!(cli(&["finetune", "--data", "x", "--preset", "huge", "--out", &out]), EXIT_USAGE);
    assert_eq!(cli(&["train-teacher", "--data", "x", "--init", "m.ckpt", "--out", &out]), EXIT_USAGE);
    assert_eq!(cli(&["finetune", "--data", "x", "--init", "m.ckpt", "--embed-dim", "8", "--out", &out]), EXIT_USAGE);
    assert_eq!(cli(&["eval", "--pred", "a", "--gt", "b", "--scaling", "global", "--out", &out]), EXIT_USAGE);
    assert_eq!(cli(&["synth", "--primitive", "cube", "--out", &out]), EXIT_USAGE);
}

#[test]
fn teacher_student_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let dir = |n: &str| p(d.path(), n);
    assert_eq!(cli(&["synth", "--n", "4", "--size", "24x32", "--seed", "1", "--out", &dir("lab")]), 0);
    assert_eq!(cli(&["synth", "--n", "4", "--size", "24x32", "--seed", "2", "--out", &dir("unl")]), 0);
    let model = ["--preset", "tiny", "--input-size", "24x32", "--steps", "3", "--batch", "2"];
    assert_eq!(cli(&[&["train-teacher", "--data", &dir("lab"), "--out", &dir("t")][..], &model].concat()), 0);
    let teacher = dir("t/model.ckpt");
    assert_eq!(cli(&["pseudo-label", "--teacher", &teacher, "--images", &dir("unl"), "--out", &dir("pl")]), 0);
    assert!(d.path().join("pl/provenance.txt").exists());

    let spec = d.path().join("spec.toml");
    std::fs::write(&spec, "cutmix_prob = 1.0\nbrightness_jitter = 0.2\n").unwrap();
    let student = |unl: &str, out: &str| {
        cli(&[
            "train-student", "--teacher", &teacher, "--labeled", &dir("lab"), "--unlabeled", unl, "--spec",
            &spec.to_string_lossy(), "--steps", "4", "--batch", "2", "--out", out,
        ])
    };
    assert_eq!(student(&dir("pl"), &dir("s1")), 0);
    // raw images get labeled on the fly with the same teacher
    assert_eq!(student(&dir("unl"), &dir("s2")), 0);
    let log = std::fs::read_to_string(d.path().join("s2/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let resolved = std::fs::read_to_string(d.path().join("s1/resolved_config.toml")).unwrap();
    assert!(resolved.contains("cutmix_prob = 1.0") && resolved.contains("contrast_jitter = 0.4"), "{resolved}");

    // pseudo-labels from another teacher are refused
    let other = ["train-teacher", "--data", &dir("lab"), "--seed", "9", "--out", &dir("t2")];
    assert_eq!(cli(&[&other[..], &model].concat()), 0);
    let code = cli(&[
        "train-student", "--teacher", &dir("t2/model.ckpt"), "--labeled", &dir("lab"), "--unlabeled", &dir("pl"),
        "--steps", "2", "--out", &dir("s3"),
    ]);
    assert_eq!(code, EXIT_DATA);

    assert_eq!(
        cli(&[
            "eval", "--model", &teacher, "--model", &dir("s1/model.ckpt"), "--method", "teacher", "--method",
            "student", "--gt", &dir("unl"), "--case", "Synthetic", "--save-pred", "--out", &dir("ev"),
        ]),
        0
    );
    let recs = records(&d.path().join("ev"));
    assert_eq!(recs.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["teacher", "student"]);
    // saved teacher predictions evaluate identically when fed back as --pred
    assert_eq!(
        cli(&["eval", "--pred", &dir("ev/pred/teacher"), "--gt", &dir("unl"), "--case", "Synthetic", "--out", &dir("ev2")]),
        0
    );
    let again = &records(&d.path().join("ev2"))[0];
    assert!((again.abs_rel - recs[0].abs_rel).abs() < 1e-5);

    assert_eq!(cli(&["render", "--depth", &dir("ev/pred/teacher"), "--out", &dir("png")]), 0);
    let ids: Vec<_> = load_dataset(dir("unl")).unwrap().into_iter().map(|s| s.id).collect();
    for id in ids {
        assert!(d.path().join(format!("png/{id}.png")).exists());
        read_depth(d.path().join(format!("ev/pred/teacher/{id}.pfm")), 1.0).unwrap();
    }
}
