//! End-to-end runs of the `xmodal` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "half_width=false",
    "image_size=16",
    "patch_size=8",
    "embed_dim=8",
    "heads=2",
    "layers=1",
    "mlp_hidden=16",
    "batch_size=2",
    "max_epochs=1",
    "folds=2",
    "synth_image_size=16",
    "synth_hyperplastic=6",
    "synth_adenomatous=6",
    "synth_subjects=4",
];

fn xmodal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmodal"))
        .args(args)
        .output()
        .expect("spawn xmodal")
}

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for kv in TINY.iter().chain(extra) {
        args.push("--set");
        args.push(kv);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr:\n{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_train_eval_attnmap_dump() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    let data_s = data.to_str().unwrap();
    let out_kv = format!("out={}", out.display());

    let o = xmodal(&with_tiny(vec!["synth", "--out", data_s], &[]));
    assert_ok(&o);
    assert!(stdout(&o).contains("(12 pairs)"), "{}", stdout(&o));
    let manifest = data.join("manifest.csv");
    assert!(manifest.exists());

    let data_kv = format!("data={}", manifest.display());
    let o = xmodal(&with_tiny(vec!["train"], &["mode=all", &out_kv, &data_kv]));
    assert_ok(&o);
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    for mode in ["wl_only", "cga", "cga_sam"] {
        assert!(report.contains(mode), "{report}");
    }
    let epochs = fs::read_to_string(out.join("epochs.csv")).unwrap();
    // header plus 3 modes x 2 folds x 1 epoch
    assert_eq!(epochs.lines().count(), 7, "{epochs}");

    let ckpt = out.join("checkpoints/cga_sam_fold1.ckpt");
    let pruned = out.join("checkpoints/cga_sam_fold1.pruned.ckpt");
    assert!(ckpt.exists() && pruned.exists());
    assert!(fs::metadata(&pruned).unwrap().len() < fs::metadata(&ckpt).unwrap().len());

    let m = manifest.to_str().unwrap();
    let full = xmodal(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", m]);
    let small = xmodal(&["eval", "--checkpoint", pruned.to_str().unwrap(), "--data", m]);
    assert_ok(&full);
    assert!(stdout(&full).starts_with("accuracy "));
    assert_eq!(stdout(&full), stdout(&small));

    let image = first_wl_image(&manifest);
    let map = dir.path().join("attn.pgm");
    let o = xmodal(&[
        "attnmap",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        map.to_str().unwrap(),
        "--response-map",
        "nbi",
    ]);
    assert_ok(&o);
    assert!(fs::read(&map).unwrap().starts_with(b"P5"));
    assert!(dir.path().join("attn_response_nbi.pgm").exists());

    let o = xmodal(&[
        "attnmap",
        "--checkpoint",
        pruned.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        map.to_str().unwrap(),
        "--response-map",
        "wl",
    ]);
    assert_eq!(o.status.code(), Some(1));

    let csv = dir.path().join("emb.csv");
    let o = xmodal(&[
        "embed-dump",
        "--checkpoint",
        pruned.to_str().unwrap(),
        "--data",
        m,
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_ok(&o);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap().split(',').count(), 3 + 8);
    assert_eq!(lines.count(), 12);
}

fn first_wl_image(manifest: &Path) -> std::path::PathBuf {
    let mut rdr = csv::Reader::from_path(manifest).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "wl_path").expect("wl_path column");
    let row = rdr.records().next().unwrap().unwrap();
    manifest.parent().unwrap().join(&row[col])
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(xmodal(&["train", "--set", "lr=abc"]).status.code(), Some(1));
    assert_eq!(xmodal(&["no-such-command"]).status.code(), Some(1));
    let missing = dir.path().join("missing.csv");
    let o = xmodal(&["--set", &format!("data={}", missing.display()), "train"]);
    assert_eq!(o.status.code(), Some(2));
    let o = xmodal(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn op_gradcheck_passes() {
    let o = xmodal(&["gradcheck", "--scope", "ops", "--trials", "5"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("checks passed"));
}
