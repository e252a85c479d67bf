use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dejavu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dejavu")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.cfg");
    let text = format!(
        "# tiny run
task = seg
out_dir = {}
data.height = 16
data.width = 16
data.train = 8
data.val = 4
base.width = 4
base.levels = 2
redaction.domain = spatial
redaction.variant = random_blocks
redaction.b = 4
crm.width = 4
crm.depth = 1
crm.steps = 2
train.epochs = 1
train.batch_size = 4
experiment.ablate_block = 4
{extra}
",
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn redact_checkerboard_blanks_half_the_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    let output = dir.path().join("out.png");
    image::RgbImage::from_pixel(16, 16, image::Rgb([200, 100, 50])).save(&input).unwrap();
    ok(&dejavu(&[
        "redact",
        "--in",
        input.to_str().unwrap(),
        "--out",
        output.to_str().unwrap(),
        "--domain",
        "spatial",
        "--variant",
        "checkerboard",
        "--b",
        "4",
    ]));
    let img = image::open(&output).unwrap().to_rgb8();
    let black = img.pixels().filter(|p| p.0 == [0, 0, 0]).count();
    assert_eq!(black, 16 * 16 / 2);
    assert_eq!(img.pixels().filter(|p| p.0 == [200, 100, 50]).count(), 16 * 16 / 2);
}

#[test]
fn redact_rejects_incomplete_spec() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.png");
    image::RgbImage::new(8, 8).save(&input).unwrap();
    let out = dejavu(&[
        "redact",
        "--in",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("o.png").to_str().unwrap(),
        "--domain",
        "spatial",
        "--variant",
        "random",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let mismatch = dejavu(&[
        "redact",
        "--in",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("o.png").to_str().unwrap(),
        "--domain",
        "spectral",
        "--variant",
        "checkerboard",
        "--b",
        "2",
    ]);
    assert!(!mismatch.status.success());
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let stdout = ok(&dejavu(&["train", "--config", &cfg, "--quiet"]));
    assert!(stdout.contains("segmentation/miou"), "{stdout}");
    let ckpt = dir.path().join("out/checkpoints/epoch_0001.safetensors");
    assert!(ckpt.exists());
    let eval = ok(&dejavu(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--split", "val"]));
    let fields: Vec<&str> = eval.trim().split(',').collect();
    assert_eq!(fields[..2], ["segmentation", "miou"]);
    let miou: f64 = fields[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&miou));
}

#[test]
fn paired_train_writes_both_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = dir.path().join("pair");
    let stdout = ok(&dejavu(&["train", "--config", &cfg, "--paired", "--quiet", "--out", out.to_str().unwrap()]));
    assert!(stdout.contains("baseline:") && stdout.contains("dejavu:"));
    assert!(out.join("baseline/metrics.csv").exists());
    assert!(out.join("dejavu/metrics.csv").exists());
}

#[test]
fn ablate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let stdout = ok(&dejavu(&["ablate", "--config", &cfg, "--seeds", "1", "--quiet"]));
    assert!(stdout.contains("spectral"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("task,redaction,metric,value,seed"));
    for (task, metric) in [("segmentation", "miou"), ("depth", "a_err"), ("normals", "m_err_deg")] {
        for arm in ["none", "spatial", "spectral"] {
            let prefix = format!("{task},{arm},{metric},");
            assert_eq!(csv.lines().filter(|l| l.starts_with(&prefix)).count(), 1, "{prefix}");
        }
    }
    assert!(dir.path().join("out/ablation.md").exists());
}

#[test]
fn bad_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "crm.nonsense = 3");
    let out = dejavu(&["train", "--config", &cfg, "--quiet"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("crm.nonsense"));
}
