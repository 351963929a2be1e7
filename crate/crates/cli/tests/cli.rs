//! End-to-end runs of the `volseg` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use quick_xml::events::Event;
use quick_xml::Reader;
use volseg_cli::logging::strip_timestamp;
use volseg_core::volume_io::{read_mask, read_volume, write_volume, Volume};

fn volseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volseg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, prefix: &str, seed: u64) {
    let o = volseg(&["phantom", "--out-dir", s(dir), "--prefix", prefix, "--seed", &seed.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn scan_entry(section: &str, prefix: &str) -> String {
    format!(
        "[[data.{section}]]\nid = \"{prefix}\"\nct = \"{prefix}_ct.vol\"\nlung = \"{prefix}_lung.vol\"\n\
         truth = \"{prefix}_truth.vol\"\nexclude = \"{prefix}_exclude.vol\"\n\n"
    )
}

/// Tiny desk config over three phantoms in `dir`.
fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    for (p, seed) in [("a", 1), ("b", 2), ("c", 3)] {
        phantom(dir, p, seed);
    }
    let mut text = format!(
        "[net]\nlevels = 3\nbase_channels = 4\ninput_depth = 16\ninput_height = 32\ninput_width = 32\n\n\
         [train]\nloss = \"dice\"\naugmentation = \"elastic\"\nlr = 1e-3\nmax_epochs = {epochs}\n\n\
         [patch]\ncrop_margin = 2\n\n[augment]\nelastic_sigma = 3.0\n\n"
    );
    text += &scan_entry("train", "a");
    text += &scan_entry("val", "b");
    text += &scan_entry("test", "c");
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn phantom_writes_volumes_and_sidecar() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), "p", 7);
    let truth = read_mask(d.path().join("p_truth.vol")).unwrap();
    let lung = read_mask(d.path().join("p_lung.vol")).unwrap();
    let ct = read_volume(d.path().join("p_ct.vol")).unwrap();
    assert_eq!(ct.dims(), [40, 32, 32]);
    assert!(truth.count() > 0);
    assert!(truth.data().iter().zip(lung.data()).all(|(&t, &l)| t <= l));
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(sidecar["spec"]["seed"], 7);
}

#[test]
fn existing_outputs_need_overwrite() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), "p", 1);
    let before = fs::read(d.path().join("p_ct.vol")).unwrap();
    let o = volseg(&["phantom", "--out-dir", s(d.path()), "--prefix", "p", "--seed", "2"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--overwrite"), "{}", stderr(&o));
    assert_eq!(fs::read(d.path().join("p_ct.vol")).unwrap(), before);
    let o = volseg(&["--overwrite", "phantom", "--out-dir", s(d.path()), "--prefix", "p", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_ne!(fs::read(d.path().join("p_ct.vol")).unwrap(), before);
}

#[test]
fn unknown_config_key_names_the_nearest_one() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1e-3\nmax_epoch = 3\n").unwrap();
    let o = volseg(&["train", "--config", s(&cfg), "--out", s(&d.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("max_epochs") || stderr(&o).contains("lr"), "{}", stderr(&o));
}

#[test]
fn invalid_value_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[net]\ninput_depth = 100\n").unwrap();
    let o = volseg(&["train", "--config", s(&cfg), "--out", s(&d.path().join("out"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("net.input_depth"), "{}", stderr(&o));
}

#[test]
fn missing_input_is_an_io_error() {
    let d = tempfile::tempdir().unwrap();
    let o = volseg(&[
        "froc",
        "--prob",
        s(&d.path().join("nope.vol")),
        "--truth",
        s(&d.path().join("nope.vol")),
        "--lung",
        s(&d.path().join("nope.vol")),
        "--out-csv",
        s(&d.path().join("f.csv")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("level=error"), "{}", stderr(&o));
}

#[test]
fn non_finite_loss_aborts_with_numeric_code() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path(), 2);
    let ct_path = d.path().join("a_ct.vol");
    let ct = read_volume(&ct_path).unwrap();
    let data = ct.data().iter().map(|_| f32::NAN).collect();
    write_volume(&Volume::new(ct.dims(), ct.spacing(), data).unwrap(), &ct_path).unwrap();
    let o = volseg(&["train", "--config", s(&cfg), "--out", s(&d.path().join("out"))]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric"), "{}", stderr(&o));
}

fn svg_marker_threshold(svg: &str) -> f64 {
    let mut reader = Reader::from_str(svg);
    let mut found = None;
    loop {
        match reader.read_event().expect("well-formed svg") {
            Event::Eof => break,
            Event::Start(e) | Event::Empty(e) => {
                let attr = |k: &[u8]| {
                    e.attributes()
                        .flatten()
                        .find(|a| a.key.as_ref() == k)
                        .map(|a| String::from_utf8(a.value.to_vec()).unwrap())
                };
                if attr(b"id").as_deref() == Some("threshold-optimal") {
                    found = Some(attr(b"data-threshold").unwrap().parse().unwrap());
                }
            }
            _ => {}
        }
    }
    found.expect("optimal marker present")
}

fn printed_threshold(out: &str) -> f64 {
    let field = out
        .split_whitespace()
        .find_map(|w| w.strip_prefix("optimal_threshold="))
        .expect("threshold printed");
    field.parse().unwrap()
}

#[test]
fn train_predict_evaluate_froc_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = |n: &str| d.path().join(n);
    let cfg = tiny_config(d.path(), 2);

    let run = |dir: &str, extra: &[&str]| {
        let mut args = vec!["--no-timestamps", "train", "--config", s(&cfg), "--out"];
        let out = p(dir);
        let out = out.to_str().unwrap().to_string();
        args.push(&out);
        args.extend_from_slice(extra);
        let o = volseg(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("r1", &[]);
    run("r2", &[]);
    for f in ["model.ckpt", "losses.csv", "run.json", "train.log"] {
        assert_eq!(fs::read(p("r1").join(f)).unwrap(), fs::read(p("r2").join(f)).unwrap(), "{f} differs");
    }
    let csv = fs::read_to_string(p("r1/losses.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,train_loss,val_loss"));
    assert_eq!(csv.lines().count(), 3);
    let log = fs::read_to_string(p("r1/train.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("msg=\"epoch_end\"")).count(), 2);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("r1/manifest.json")).unwrap()).unwrap();
    assert!(manifest["inputs"].as_array().unwrap().len() >= 4);

    // timestamps differ between runs but the events do not
    let o = volseg(&["train", "--config", s(&cfg), "--out", s(&p("r3"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stamped = fs::read_to_string(p("r3/train.log")).unwrap();
    assert!(stamped.lines().all(|l| l.starts_with("ts=")));
    let stripped: Vec<&str> = stamped.lines().map(strip_timestamp).collect();
    assert_eq!(stripped, log.lines().collect::<Vec<_>>());

    let ckpt = p("r1/model.ckpt");
    let o = volseg(&[
        "predict",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&p("c_ct.vol")),
        "--lung",
        s(&p("c_lung.vol")),
        "--crop-margin",
        "2",
        "--out-prob",
        s(&p("c_prob.vol")),
        "--out-seg",
        s(&p("c_seg.vol")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let prob = read_volume(p("c_prob.vol")).unwrap();
    let seg = read_mask(p("c_seg.vol")).unwrap();
    let lung = read_mask(p("c_lung.vol")).unwrap();
    assert_eq!(prob.dims(), lung.dims());
    assert!(prob.data().iter().zip(lung.data()).all(|(&v, &l)| l != 0 || v == 0.0));
    assert!(seg.data().iter().zip(prob.data()).all(|(&m, &v)| (m != 0) == (v > 0.0 && v >= 0.5)));

    let o = volseg(&["evaluate", "--ckpt", s(&ckpt), "--config", s(&cfg), "--out", s(&p("eval"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t_eval = printed_threshold(&stdout(&o));
    assert_eq!(svg_marker_threshold(&fs::read_to_string(p("eval/froc.svg")).unwrap()), t_eval);
    let froc_csv = fs::read_to_string(p("eval/froc.csv")).unwrap();
    assert_eq!(froc_csv.lines().next(), Some("scan_id,threshold,tp,fp,fn,sensitivity,dice"));
    assert_eq!(froc_csv.lines().count(), 1 + 19);

    let o = volseg(&[
        "froc",
        "--prob",
        s(&p("c_prob.vol")),
        "--truth",
        s(&p("c_truth.vol")),
        "--lung",
        s(&p("c_lung.vol")),
        "--exclude",
        s(&p("c_exclude.vol")),
        "--scan-id",
        "c",
        "--out-csv",
        s(&p("c_froc.csv")),
        "--out-svg",
        s(&p("c_froc.svg")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        svg_marker_threshold(&fs::read_to_string(p("c_froc.svg")).unwrap()),
        printed_threshold(&stdout(&o))
    );
    // one test scan: the per-scan curve equals the evaluate curve
    assert_eq!(fs::read_to_string(p("c_froc.csv")).unwrap(), froc_csv);
}

#[test]
fn augment_preview_keeps_dims() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), "p", 3);
    for kind in ["rigid", "elastic"] {
        let out = d.path().join(kind);
        let o = volseg(&[
            "augment-preview",
            "--in",
            s(&d.path().join("p_ct.vol")),
            "--mask",
            s(&d.path().join("p_truth.vol")),
            "--kind",
            kind,
            "--out-dir",
            s(&out),
            "--sigma",
            "3",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let after = read_mask(out.join("after_mask.vol")).unwrap();
        assert_eq!(after.dims(), [40, 32, 32]);
        assert!(after.count() > 0);
    }
}
