use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const GEN: &str = r#"
n_patches = 40
n_classes = 3
habitat_scale_m = 20.0
image_size = 16
"#;

const RUN: &str = r#"
batch_size = 8
epochs = 1
[augment]
global_size = 12
local_size = 4
n_local = 2
[encoder]
widths = [4, 4]
latent_dim = 8
projector_hidden = 8
projector_dim = 6
predictor_hidden = 4
prototypes = 5
[loss]
queue_size = 16
clusters = 4
"#;

fn geossl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geossl"))
        .args(args)
        .env("GEOSSL_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn survey(dir: &Path, seed: &str) -> PathBuf {
    let gen = write(dir, "gen.toml", GEN);
    let out = dir.join(format!("survey{seed}"));
    ok(&geossl(&[
        "gen-survey",
        "--config",
        s(&gen),
        "--seed",
        seed,
        "--out",
        s(&out),
    ]));
    out
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_survey_is_deterministic_and_seeded() {
    let t = tempfile::tempdir().unwrap();
    let a = survey(t.path(), "7");
    let gen = t.path().join("gen.toml");
    let b = t.path().join("again");
    ok(&geossl(&[
        "gen-survey",
        "--config",
        s(&gen),
        "--seed",
        "7",
        "--out",
        s(&b),
    ]));
    assert_eq!(tree(&a), tree(&b));
    let c = survey(t.path(), "8");
    assert_ne!(
        fs::read(a.join("manifest.jsonl")).unwrap(),
        fs::read(c.join("manifest.jsonl")).unwrap()
    );
    assert!(a.join("generator.toml").exists());
}

#[test]
fn usage_errors_exit_with_2() {
    let t = tempfile::tempdir().unwrap();
    let out = geossl(&["gen-survey", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = geossl(&["train", "--objective", "byol", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("simclr, simsiam, moco, swav, deepcluster, dino"), "{err}");
    let out = geossl(&["train", "--mode", "geo", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_documents_config_keys() {
    let out = geossl(&["train", "--help"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for key in [
        "[config: sampler.r_loc]",
        "[config: objective]",
        "[config: optimizer.lr]",
        "tau_s",
        "global_size",
    ] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn train_extract_eval_compare_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let sv = survey(t.path(), "1");
    let manifest = sv.join("manifest.jsonl");
    let cfg = write(t.path(), "run.toml", RUN);
    let mut reports = Vec::new();
    for mode in ["standard", "geo"] {
        let run = t.path().join(format!("run_{mode}"));
        let out = geossl(&[
            "train",
            "--config",
            s(&cfg),
            "--objective",
            "simclr",
            "--mode",
            mode,
            "--r-loc",
            "5",
            "--manifest",
            s(&manifest),
            "--out",
            s(&run),
        ]);
        ok(&out);
        let ck = run.join("checkpoints/epoch_0001.ckpt");
        assert!(ck.exists());
        let echoed = fs::read_to_string(run.join("config.toml")).unwrap();
        assert!(echoed.contains(&format!("mode = \"{mode}\"")), "{echoed}");
        let latents = run.join("latents.csv");
        ok(&geossl(&[
            "extract",
            "--checkpoint",
            s(&ck),
            "--manifest",
            s(&manifest),
            "--out",
            s(&latents),
        ]));
        assert_eq!(fs::read_to_string(&latents).unwrap().lines().count(), 41);
        let ev = run.join("eval");
        ok(&geossl(&[
            "eval",
            "--latents",
            s(&latents),
            "--manifest",
            s(&manifest),
            "--pca-dim",
            "4",
            "--out",
            s(&ev),
        ]));
        assert!(ev.join("confusion.csv").exists());
        reports.push(ev.join("report.json"));
    }
    let cmp = t.path().join("cmp.csv");
    ok(&geossl(&[
        "compare",
        "--a",
        s(&reports[0]),
        "--b",
        s(&reports[1]),
        "--out",
        s(&cmp),
    ]));
    let text = fs::read_to_string(&cmp).unwrap();
    assert_eq!(text.lines().count(), 1 + 4, "{text}");
    assert!(text.lines().nth(1).unwrap().starts_with("macro,"));
}

#[test]
fn train_reruns_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let sv = survey(t.path(), "2");
    let manifest = sv.join("manifest.jsonl");
    let cfg = write(t.path(), "run.toml", RUN);
    let run = |name: &str| {
        let dir = t.path().join(name);
        ok(&geossl(&[
            "train",
            "--config",
            s(&cfg),
            "--objective",
            "dino",
            "--manifest",
            s(&manifest),
            "--epochs",
            "2",
            "--out",
            s(&dir),
        ]));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["checkpoints/epoch_0002.ckpt", "loss.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    // The echoed configs differ only in the output directory.
    let echo = |d: &Path| -> String {
        let text = fs::read_to_string(d.join("config.toml")).unwrap();
        text.lines()
            .filter(|l| !l.starts_with("out_dir"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(echo(&a), echo(&b));
}

#[test]
fn experiment_grid_reports_every_cell() {
    let t = tempfile::tempdir().unwrap();
    let sv = survey(t.path(), "3");
    let matrix = format!(
        r#"
dataset = "tiny"
objectives = ["simclr", "moco"]
modes = ["standard", "geo"]
seeds = [0]
dims = [0, 4]
r_loc = 5.0
[run]
{}
[run.data]
manifest = "{}"
[eval.probe]
iterations = 200
"#,
        RUN.replace("[augment]", "[run.augment]")
            .replace("[encoder]", "[run.encoder]")
            .replace("[loss]", "[run.loss]"),
        s(&sv.join("manifest.jsonl"))
    );
    let m = write(t.path(), "matrix.toml", &matrix);
    let out_a = t.path().join("exp_a");
    ok(&geossl(&["experiment", "--matrix", s(&m), "--out", s(&out_a)]));
    let csv = fs::read_to_string(out_a.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2, "{csv}");
    assert!(csv.contains("GeoCLR") && csv.contains("GeoMoCo"));
    let out_b = t.path().join("exp_b");
    ok(&geossl(&["experiment", "--matrix", s(&m), "--out", s(&out_b)]));
    assert_eq!(csv, fs::read_to_string(out_b.join("summary.csv")).unwrap());

    // A cell that cannot train is reported and turns the exit status to 1.
    let broken = matrix
        .replace("dims = [0, 4]", "dims = [0]")
        .replace("clusters = 4", "clusters = 400");
    let broken = broken.replace(
        "objectives = [\"simclr\", \"moco\"]",
        "objectives = [\"simclr\", \"deepcluster\"]",
    );
    let m = write(t.path(), "broken.toml", &broken);
    let out_c = t.path().join("exp_c");
    let out = geossl(&["experiment", "--matrix", s(&m), "--out", s(&out_c)]);
    assert_eq!(out.status.code(), Some(1));
    let csv = fs::read_to_string(out_c.join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert_eq!(csv.matches("FAILED").count(), 2, "{csv}");
}
