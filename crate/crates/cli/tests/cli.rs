use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lesionscope"));
    c.env_remove("LESIONSCOPE_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// A tiny dataset and a briefly trained model.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(&[
            "generate",
            "--out",
            &s(&f.path("data")),
            "--seed",
            "1",
            "--samples-per-class",
            "3",
        ]);
        ok(&[
            "train",
            "--manifest",
            &s(&f.manifest()),
            "--out",
            &s(&f.path("model")),
            "--epochs",
            "2",
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn manifest(&self) -> PathBuf {
        self.path("data/manifest.csv")
    }

    fn model_args(&self) -> Vec<String> {
        vec![
            "--model".into(),
            s(&self.path("model/model.json")),
            "--weights".into(),
            s(&self.path("model/model.weights")),
        ]
    }

    fn with_model(&self, cmd: &str, rest: &[&str]) -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(self.model_args());
        v.extend(rest.iter().map(|r| r.to_string()));
        v
    }

    /// Writes a manifest holding only the given rows of the generated one.
    fn sub_manifest(&self, name: &str, keep: impl Fn(&str) -> bool) -> PathBuf {
        let text = std::fs::read_to_string(self.manifest()).unwrap();
        let mut lines = text.lines();
        let mut out = format!("{}\n", lines.next().unwrap());
        for line in lines.filter(|l| keep(l)) {
            out.push_str(line);
            out.push('\n');
        }
        let path = self.path(&format!("data/{name}"));
        std::fs::write(&path, out).unwrap();
        path
    }
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

fn files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p.strip_prefix(dir).unwrap_or(&p).display().to_string());
        }
    }
    out.sort();
    out
}

#[test]
fn training_writes_model_and_history() {
    let f = Fixture::new();
    let mut got = files(&f.path("model"));
    got.sort();
    assert_eq!(got, ["history.csv", "model.json", "model.weights"]);
    let history = std::fs::read_to_string(f.path("model/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn explain_single_image_single_method() {
    let f = Fixture::new();
    let out = f.path("ex");
    let image = s(&f.path("data/images/spots_0000.png"));
    ok(&refs(&f.with_model(
        "explain",
        &[
            "--image",
            &image,
            "--methods",
            "saliency",
            "--out",
            &s(&out),
        ],
    )));
    let all = files(&out);
    assert_eq!(all.iter().filter(|p| p.ends_with(".expl")).count(), 1);
    assert_eq!(all.iter().filter(|p| p.ends_with(".png")).count(), 2);
    assert!(out.join("spots_0000/saliency.expl").exists());
    assert!(out.join("spots_0000/panel.png").exists());
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("image,method,metric,value\n"));
    assert!(metrics.contains("spots_0000,saliency,raw_sum,"));
}

#[test]
fn explain_rejects_unknown_method() {
    let f = Fixture::new();
    let image = s(&f.path("data/images/spots_0000.png"));
    let out = run(&refs(&f.with_model(
        "explain",
        &[
            "--image",
            &image,
            "--methods",
            "saliency,occlusion",
            "--out",
            &s(&f.path("x")),
        ],
    )));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("occlusion"), "{err}");
    for name in [
        "saliency",
        "gi",
        "gbp",
        "smoothgrad",
        "ig",
        "dtd",
        "lrp-z",
        "lrp-eps",
    ] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn explain_panel_orders_all_methods() {
    let f = Fixture::new();
    let out = f.path("ex");
    let manifest = f.sub_manifest("one.csv", |l| l.contains("spots_0001"));
    ok(&refs(&f.with_model(
        "explain",
        &[
            "--manifest",
            &s(&manifest),
            "--methods",
            "lrp-eps,saliency,ig",
            "--steps",
            "20",
            "--out",
            &s(&out),
        ],
    )));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let methods: Vec<&str> = metrics
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    let first = |m: &str| methods.iter().position(|&x| x == m).unwrap();
    assert!(first("saliency") < first("ig") && first("ig") < first("lrp-eps"));
    assert!(metrics.contains("mass_in_mask"));
}

#[test]
fn output_directory_from_environment() {
    let f = Fixture::new();
    let out = f.path("from_env");
    let status = bin()
        .args(["generate", "--seed", "2", "--samples-per-class", "1"])
        .env("LESIONSCOPE_OUT", &out)
        .output()
        .unwrap();
    assert!(status.status.success());
    assert!(out.join("manifest.csv").exists());
}

#[test]
fn predict_writes_predictions_and_confusion() {
    let f = Fixture::new();
    let out = f.path("pred");
    let stdout = ok(&refs(&f.with_model(
        "predict",
        &["--manifest", &s(&f.manifest()), "--out", &s(&out)],
    )));
    assert!(stdout.contains("accuracy"));
    let preds = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 10);
    let cm = std::fs::read_to_string(out.join("confusion.csv")).unwrap();
    assert!(cm.starts_with("true\\predicted,spots,yellowing,healthy"));
    assert!(out.join("confusion.png").exists());
}

#[test]
fn compare_healthy_only_has_no_localization() {
    let f = Fixture::new();
    let out = f.path("cmp");
    let manifest = f.sub_manifest("healthy.csv", |l| l.contains("healthy_0000"));
    ok(&refs(&f.with_model(
        "compare",
        &[
            "--manifest",
            &s(&manifest),
            "--methods",
            "saliency,gbp",
            "--out",
            &s(&out),
        ],
    )));
    let loc = std::fs::read_to_string(out.join("localization.csv")).unwrap();
    assert_eq!(loc, "image,method,metric,value\n");
    let agree = std::fs::read_to_string(out.join("agreement.csv")).unwrap();
    assert!(agree.contains("healthy_0000,saliency:gbp,spearman,"));
}

#[test]
fn compare_identical_methods_agree_fully() {
    let f = Fixture::new();
    let out = f.path("cmp");
    let manifest = f.sub_manifest("spots.csv", |l| l.contains("spots_000"));
    ok(&refs(&f.with_model(
        "compare",
        &[
            "--manifest",
            &s(&manifest),
            "--methods",
            "gi,gi",
            "--out",
            &s(&out),
        ],
    )));
    let agree = std::fs::read_to_string(out.join("agreement.csv")).unwrap();
    let rows: Vec<&str> = agree.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        assert!(row.ends_with(",1.0") || row.ends_with(",1"), "{row}");
    }
    assert!(out.join("summary.csv").exists());
    assert!(out.join("flags.csv").exists());
}

#[test]
fn compare_requires_masks() {
    let f = Fixture::new();
    let text = std::fs::read_to_string(f.manifest()).unwrap();
    let stripped: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 2 {
                let fields: Vec<&str> = l.split(',').collect();
                format!("{},{}\n", fields[0], fields[1])
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    let path = f.path("data/nomask.csv");
    std::fs::write(&path, stripped).unwrap();
    let out = run(&refs(&f.with_model(
        "compare",
        &["--manifest", &s(&path), "--out", &s(&f.path("c"))],
    )));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("without a mask") && err.contains("row 2"),
        "{err}"
    );
}

#[test]
fn validate_default_run_passes() {
    let stdout = ok(&["validate"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 9);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")), "{stdout}");
}

#[test]
fn validate_fault_injection_trips_only_gbp() {
    let out = run(&["validate", "--nets", "6", "--inject-fault", "gbp"]);
    assert!(!out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    for line in stdout.lines() {
        assert_eq!(
            line.starts_with("FAIL"),
            line.contains("gbp-relu-outflow"),
            "{line}"
        );
    }
}

#[test]
fn validate_list_and_gradcheck_alias() {
    let listed = ok(&["validate", "--list"]);
    assert_eq!(listed.lines().next(), Some("gradcheck"));
    assert_eq!(listed.lines().count(), 9);
    let stdout = ok(&["gradcheck", "--nets", "3"]);
    assert!(stdout.starts_with("PASS gradcheck observed="));
    assert_eq!(stdout.lines().count(), 1);
    assert!(!run(&["validate", "--only", "bogus"]).status.success());
}
