use std::path::Path;
use std::process::{Command, Output};

fn raunet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raunet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = raunet(&["inspect", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(raunet(&[]).status.code(), Some(1));
    assert_eq!(raunet(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = raunet(&["eval", "--seg", "nope.rvol", "--gt", "nope.rvol"]);
    assert_eq!(o.status.code(), Some(2));
    let bad = dir.path().join("bad.rvol");
    std::fs::write(&bad, b"not a volume").unwrap();
    assert_eq!(raunet(&["inspect", "--rvol", arg(&bad)]).status.code(), Some(2));
}

#[test]
fn inspect_network_prints_trace_and_count() {
    let o = raunet(&["inspect", "--net", "raunet2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("224^2×32×1"), "{text}");
    assert!(text.contains("parameters: 3547889"), "{text}");
    assert_eq!(raunet(&["inspect", "--net", "unet9"]).status.code(), Some(2));
}

#[test]
fn inspect_config_lists_provenance() {
    let o = raunet(&["inspect", "--config"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("lr = 0.001"));
    assert!(text.contains("(published)") && text.contains("(chosen)"));
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/phantom.conf");
    assert!(stdout(&raunet(&["inspect", "--config", cfg])).contains("loc_size = 64"));
}

#[test]
fn phantom_preprocess_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(raunet(&["phantom", "--out", arg(d), "--seed", "3"]).status.success());
    for f in ["ct.rvol", "liver.rvol", "tumor.rvol", "phantom.txt"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let header = stdout(&raunet(&["inspect", "--rvol", arg(&d.join("liver.rvol"))]));
    assert!(header.contains("extents: 64 x 64 x 32") && header.contains("u8"), "{header}");

    let prep = d.join("prep.rvol");
    assert!(raunet(&["preprocess", "--input", arg(&d.join("ct.rvol")), "--out", arg(&prep)]).status.success());
    assert!(stdout(&raunet(&["inspect", "--rvol", arg(&prep)])).contains("f32"));

    let liver = d.join("liver.rvol");
    let o = raunet(&["eval", "--seg", arg(&liver), "--gt", arg(&liver), "--case", "same"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    let row = csv.lines().find(|l| l.starts_with("same,")).expect("case row");
    let dc: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(dc, 1.0, "{row}");
}

#[test]
fn train_then_infer_localization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(raunet(&["phantom", "--out", arg(d)]).status.success());
    let cfg = d.join("tiny.conf");
    std::fs::write(&cfg, "loc_size = 32\nepochs = 1\n").unwrap();
    let ckpt = d.join("loc.rawt");
    let losses = d.join("loss.csv");
    let o = raunet(&[
        "train", "--stage", "loc", "--case", arg(d), "--config", arg(&cfg), "--net", "raunet1-d8-t1", "--out",
        arg(&ckpt), "--loss-csv", arg(&losses),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&losses).unwrap().lines().count(), 2);
    // An untrained localizer may find nothing; either way the exit status
    // distinguishes success from a data error.
    let out = d.join("coarse.rvol");
    let o = raunet(&[
        "infer", "--stage", "loc", "--input", arg(&d.join("ct.rvol")), "--checkpoint", arg(&ckpt), "--config",
        arg(&cfg), "--out", arg(&out),
    ]);
    match o.status.code() {
        Some(0) => assert!(out.exists()),
        Some(2) => assert!(String::from_utf8_lossy(&o.stderr).contains("no liver component")),
        other => panic!("unexpected exit {other:?}"),
    }
}

#[test]
fn fold_out_of_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = raunet(&["train", "--stage", "liver", "--case", arg(d), "--fold", "0", "--out", arg(&d.join("x.rawt"))]);
    assert_eq!(o.status.code(), Some(2));
}
