mod common;

use common::*;
use guidance_uda::checkpoint::{Archive, ArchiveKind};
use guidance_uda::data_synth::{read_dataset, write_dataset, DomainShift, IGNORE};
use guidance_uda::evaluation::dump_predictions;
use guidance_uda::{Error, Trainer};
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_guidance-uda"))
}

fn ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed:\n{}\n{}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn pngs(dir: &Path, prefix: &str) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            n.starts_with(prefix) && n.ends_with(".png")
        })
        .count()
}

#[test]
fn dataset_round_trip_is_exact() {
    let ds = scenes(4, 32, 10, target_shift());
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds.meta, "train", &ds.images).unwrap();
    let back = read_dataset(dir.path(), "train").unwrap();
    assert_eq!(back.meta, ds.meta);
    assert_eq!(back.images, ds.images);
}

#[test]
fn corrupt_and_out_of_range_files_name_the_path() {
    let ds = scenes(5, 16, 2, DomainShift::IDENTITY);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds.meta, "train", &ds.images).unwrap();
    let img = dir.path().join("images/train/000001.png");
    std::fs::write(&img, b"not a png").unwrap();
    let err = read_dataset(dir.path(), "train").unwrap_err();
    assert!(matches!(err, Error::Format { ref path, .. } if path == &img), "{err}");

    write_dataset(dir.path(), &ds.meta, "train", &ds.images).unwrap();
    let lbl = dir.path().join("labels/train/000000.png");
    image::GrayImage::from_pixel(16, 16, image::Luma([9])).save(&lbl).unwrap();
    let err = read_dataset(dir.path(), "train").unwrap_err();
    assert!(err.to_string().contains("000000.png"), "{err}");

    std::fs::remove_file(dir.path().join("labels/train/000001.png")).unwrap();
    image::GrayImage::from_pixel(16, 16, image::Luma([IGNORE])).save(&lbl).unwrap();
    let err = read_dataset(dir.path(), "train").unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(read_dataset(dir.path(), "val").is_err());
}

#[test]
fn prediction_dump_counts_and_palette() {
    let ds = {
        let mut d = scenes(6, 32, 5, target_shift());
        d.meta.splits.insert("val".into(), 5);
        d
    };
    let dir = tempfile::tempdir().unwrap();
    let plain = Trainer::new(tiny_config("dacs", 0)).unwrap();
    let s = dump_predictions(plain.model(), plain.student(), None, &ds, dir.path(), 0).unwrap();
    assert_eq!((s.prediction_panels, s.guider_panels), (5, 0));
    assert!(s.notice.is_some());
    assert_eq!(pngs(dir.path(), ""), 5);
    let palette = std::fs::read_to_string(dir.path().join("palette.json")).unwrap();
    let palette: serde_json::Value = serde_json::from_str(&palette).unwrap();
    assert_eq!(palette["classes"][0]["name"], "background");
    assert_eq!(palette["classes"][2]["rgb"], serde_json::json!([128, 64, 128]));

    let dir = tempfile::tempdir().unwrap();
    let guided = Trainer::new(tiny_config("dacs_guidance", 0)).unwrap();
    let s = dump_predictions(guided.model(), guided.student(), guided.guider(), &ds, dir.path(), 0).unwrap();
    assert_eq!((s.prediction_panels, s.guider_panels), (5, 5));
    assert_eq!(pngs(dir.path(), ""), 10);
}

#[test]
fn cli_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(bin().args(["datagen", "--seed", "1", "--count", "6", "--size", "32", "--out"]).arg(d.join("src")));
    ok(bin()
        .args(["datagen", "--seed", "2", "--count", "6", "--val-count", "3", "--size", "32"])
        .args(["--shift-hue", "0.3", "--shift-brightness", "0.8", "--shift-noise", "0.05", "--out"])
        .arg(d.join("tgt")));
    assert_eq!(read_dataset(&d.join("tgt"), "val").unwrap().len(), 3);

    let mut cfg = tiny_config("dacs", 0);
    cfg.total_steps = 3;
    cfg.warmup_steps = Some(1);
    cfg.source_dir = Some("src".into());
    cfg.target_dir = Some("tgt".into());
    cfg.save(&d.join("run.toml")).unwrap();
    let cfg_path = d.join("run.toml");

    ok(bin().arg("train").arg("--config").arg(&cfg_path).args(["--method", "dacs_guidance", "--out"]).arg(d.join("run")));
    let run = d.join("run");
    for f in ["metrics.csv", "eval.csv", "config.toml", "final.ckpt", "report.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,L_sup,L_mix,L_gt,q,r,beta,total");
    assert_eq!(metrics.lines().count(), 4);

    ok(bin().arg("export").arg("--checkpoint").arg(run.join("final.ckpt")).arg("--out").arg(d.join("model.ckpt")));
    let exported = Archive::read(&d.join("model.ckpt")).unwrap();
    assert_eq!(exported.kind, ArchiveKind::Inference);
    assert_eq!(exported.names().filter(|n| n.starts_with("guider/")).count(), 0);

    for ck in [run.join("final.ckpt"), d.join("model.ckpt")] {
        let report = d.join("report.json");
        ok(bin().arg("eval").arg("--checkpoint").arg(&ck).arg("--data").arg(d.join("tgt")).arg("--out").arg(&report));
        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert!(json["miou"].as_f64().unwrap() >= 0.0);
        assert_eq!(json["confusion"].as_array().unwrap().len(), 6);
    }
    let dump = d.join("dump");
    ok(bin()
        .arg("eval")
        .arg("--checkpoint")
        .arg(run.join("final.ckpt"))
        .arg("--data")
        .arg(d.join("tgt"))
        .arg("--out")
        .arg(d.join("r2.json"))
        .arg("--dump")
        .arg(&dump));
    assert_eq!(pngs(&dump, "pred_"), 3);
    assert_eq!(pngs(&dump, "guided_"), 3);

    ok(bin().arg("mix-preview").arg("--source").arg(d.join("src")).arg("--target").arg(d.join("tgt")).arg("--out").arg(d.join("mix")));
    for f in ["x_source.png", "x_target.png", "x_mixed.png", "y_mixed.png", "mask.png"] {
        assert!(d.join("mix").join(f).exists(), "{f}");
    }

    // Resume continues to a longer schedule stored in the checkpoint.
    ok(bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg_path)
        .arg("--resume")
        .arg(run.join("final.ckpt"))
        .args(["--steps", "5", "--out"])
        .arg(d.join("run")));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4"]);
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin().args(["datagen", "--size", "63", "--count", "1", "--out"]).arg(d.join("x")).output().unwrap();
    assert!(!out.status.success());

    let cfg = tiny_config("dacs", 0);
    cfg.save(&d.join("nodata.toml")).unwrap();
    let out = bin().arg("train").arg("--config").arg(d.join("nodata.toml")).arg("--out").arg(d.join("r")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("target_dir"));

    let out = bin().arg("train").arg("--config").arg(d.join("nodata.toml")).args(["--method", "mae", "--out"]).arg(d.join("r")).output().unwrap();
    assert!(!out.status.success());

    let out = bin().arg("eval").arg("--checkpoint").arg(d.join("missing.ckpt")).arg("--data").arg(d).arg("--out").arg(d.join("r.json")).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));
}
