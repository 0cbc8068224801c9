//! End-to-end runs of the `ntscc` binary on a tiny untrained model.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use candle_core::DType;
use ntscc::checkpoint::{self, TrainState};
use ntscc::dataset::synthetic_image;
use ntscc::model::NtsccModel;
use ntscc::params::ParamStore;
use ntscc::transform::ArchConfig;

fn ntscc(args: &[&str]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_ntscc"));
    for (k, _) in std::env::vars_os() {
        if k.to_string_lossy().starts_with("NTSCC_") {
            c.env_remove(k);
        }
    }
    c.args(args).output().expect("spawn ntscc")
}

fn ok(args: &[&str]) -> String {
    let o = ntscc(args);
    assert!(
        o.status.success(),
        "ntscc {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    ckpt: PathBuf,
    images: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let store = ParamStore::new(0, DType::F32);
    let arch = ArchConfig::micro();
    NtsccModel::new(&store, &arch).unwrap();
    let ckpt = root.join("micro.safetensors");
    let state = TrainState {
        iteration: 0,
        seed: 0,
        stage: "base".into(),
    };
    checkpoint::save(&ckpt, &store, &arch, &state).unwrap();
    let images = root.join("images");
    std::fs::create_dir_all(&images).unwrap();
    for i in 0..2 {
        synthetic_image(64, 64, 40 + i)
            .save_png(images.join(format!("im{i}.png")))
            .unwrap();
    }
    Fixture {
        _dir: dir,
        root,
        ckpt,
        images,
    }
}

fn csv_rows(p: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(p)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

#[test]
fn bdrate_of_a_curve_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("curve.csv");
    std::fs::write(&c, "rho,psnr_db\n0.01,26\n0.02,29\n0.04,31.5\n0.08,33\n").unwrap();
    for m in ["cubic", "pchip"] {
        let out = ok(&["bdrate", "--anchor", s(&c), "--test", s(&c), "--method", m]);
        let v: f64 = out
            .trim()
            .trim_start_matches("BD-rate ")
            .trim_end_matches('%')
            .parse()
            .unwrap();
        assert!(v.abs() < 5e-4, "{m}: {out}");
    }
}

#[test]
fn sweep_writes_one_row_per_image_and_operating_point() {
    let f = fixture();
    let out = f.root.join("sweep");
    ok(&[
        "--out",
        s(&out),
        "--seed",
        "3",
        "sweep",
        "--checkpoint",
        s(&f.ckpt),
        "--data",
        s(&f.images),
        "--lambdas",
        "0.18,0.72",
        "--snrs",
        "0,10",
    ]);
    assert_eq!(csv_rows(&out.join("rd_points.csv")).len(), 2 * 2 * 2);
    assert_eq!(csv_rows(&out.join("surface.csv")).len(), 2 * 2);
    assert!(std::fs::read_to_string(out.join("surface.svg"))
        .unwrap()
        .starts_with("<svg"));
    assert!(out.join("config.resolved.toml").exists());
}

#[test]
fn diag_on_identical_checkpoints_is_all_ones() {
    let f = fixture();
    let out = f.root.join("diag");
    ok(&[
        "--out",
        s(&out),
        "diag",
        "--checkpoints",
        s(&f.ckpt),
        s(&f.ckpt),
        "--data",
        s(&f.images),
    ]);
    let rows = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(out.join("similarity.csv"))
        .unwrap()
        .records()
        .map(|r| {
            r.unwrap()
                .iter()
                .map(|v| v.parse::<f64>().unwrap())
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row.len(), 2);
        assert!(row.iter().all(|&v| (v - 1.0).abs() < 1e-6), "{row:?}");
    }
}

#[test]
fn transmit_is_reproducible_and_artifacts_round_trip() {
    let f = fixture();
    let img = f.images.join("im0.png");
    let run = |name: &str| {
        let out = f.root.join(name);
        ok(&[
            "--out",
            s(&out),
            "--seed",
            "7",
            "--snr-db=3.5",
            "transmit",
            "--checkpoint",
            s(&f.ckpt),
            "--image",
            s(&img),
        ]);
        out
    };
    let (a, b) = (run("t1"), run("t2"));
    for file in [
        "reconstruction.png",
        "rate_map.png",
        "stream.bin",
        "rd_point.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let bytes = std::fs::read(a.join("stream.bin")).unwrap();
    let stream = ntscc::jscc::SymbolStream::from_bytes(&bytes).unwrap();
    assert_eq!(stream.to_bytes(), bytes);
    let png = ntscc::jscc::SideInfoPacket {
        png: std::fs::read(a.join("rate_map.png")).unwrap(),
    };
    let map = ntscc::jscc::deserialize_rate_map(&png, ArchConfig::micro().rate_bits).unwrap();
    assert_eq!(map.dims(), (4, 4));
    let point: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("rd_point.json")).unwrap()).unwrap();
    assert_eq!(point["snr_db"], 3.5);
    assert!(point["rho"].as_f64().unwrap() >= 0.0);
}

#[test]
fn adapt_writes_one_trace_row_per_step() {
    let f = fixture();
    let out = f.root.join("adapt");
    ok(&[
        "--out",
        s(&out),
        "adapt",
        "--checkpoint",
        s(&f.ckpt),
        "--image",
        s(&f.images.join("im1.png")),
        "--steps",
        "3",
    ]);
    let rows = csv_rows(&out.join("trace.csv"));
    assert_eq!(rows.len(), 4);
    assert!(out.join("reconstruction.png").exists());
}

#[test]
fn train_runs_from_a_config_and_reports_missing_data() {
    let f = fixture();
    let cfg = f.root.join("run.toml");
    std::fs::write(
        &cfg,
        "[arch]\nstage_channels = 4\nbottleneck = 4\nblocks_per_stage = [0, 0, 0, 0]\nentropy_blocks = 0\nchannels_per_head = 4\nhyper_channels = 4\njscc_dim = 8\nsnr_fcn_hidden = 4\n\
         [train]\niterations = 3\npretrain_iterations = 1\nbatch_size = 2\ncrop = 32\nlog_every = 1\n\
         [data.synthetic]\nimages = 4\nheight = 48\nwidth = 48\n",
    )
    .unwrap();
    let out = f.root.join("train");
    ok(&["--config", s(&cfg), "--out", s(&out), "train"]);
    assert!(out.join("checkpoint.safetensors").exists());
    assert_eq!(csv_rows(&out.join("metrics.csv")).len(), 3);
    let ck = checkpoint::load(out.join("checkpoint.safetensors")).unwrap();
    assert_eq!(ck.state.iteration, 3);

    let o = ntscc(&["--out", s(&f.root.join("nodata")), "train"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no training data"));

    let o = ntscc(&[
        "--config",
        s(&cfg),
        "--out",
        s(&f.root.join("bad")),
        "--lambda=-1",
        "train",
    ]);
    assert!(!o.status.success());
}
