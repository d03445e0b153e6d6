use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use image::{Rgb, RgbImage};
use phytrack::cli::{cmd_eval, cmd_synth, cmd_track, cmd_train, MANIFEST_NAME};
use phytrack::config::{RunConfig, RESOLVED_NAME};
use phytrack::dataset::write_sequence;
use phytrack::mot::{read_mot, write_mot, MotRow};
use phytrack::train::LOSS_CSV_HEADER;
use phytrack::Error;

const TINY: &str = "\
# small enough to train in seconds
width=64
height=48
num_frames=10
train_sequences=1
test_sequences=1
spawn_rate=0.2
widths=4,8,8,8
feat_channels=8
ata_channels=8
attn_dim=4
embed_dim=8
head_hidden=4
epochs=2
batch_size=3
lr=0.002
decay_epochs=none
";

fn tiny() -> RunConfig {
    RunConfig::parse(TINY, "tiny").unwrap()
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_phytrack"));
    c.env("RUST_LOG", "error");
    c
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn boxed(frame: u32, id: u32, left: f64) -> MotRow {
    MotRow { frame, id, left, top: 10.0, width: 10.0, height: 10.0, conf: 1.0, class: 0, visibility: 1.0 }
}

#[test]
fn synth_layout_manifest_and_tiers() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = cmd_synth(&tiny(), dir.path(), false).unwrap();
    let seq = dir.path().join("train/seq-01");
    for i in 1..=10 {
        assert!(seq.join(format!("img1/{i:06}.png")).is_file());
    }
    assert!(!seq.join("img1/000011.png").exists());
    assert!(seq.join("gt/gt.txt").is_file() && seq.join("seqinfo.txt").is_file());
    assert!(dir.path().join(RESOLVED_NAME).is_file() && dir.path().join(MANIFEST_NAME).is_file());
    let noise_of = |variant: &str| -> usize {
        let line = manifest.lines().find(|l| l.starts_with(&format!("test\t{variant}\t"))).unwrap();
        let noise = line.rsplit('\t').next().unwrap();
        if noise == "none" { 0 } else { noise.split(',').count() }
    };
    assert_eq!((noise_of("easy"), noise_of("medium"), noise_of("hard")), (0, 3, 4));
    let hard = manifest.lines().find(|l| l.starts_with("test\thard")).unwrap();
    let medium = manifest.lines().find(|l| l.starts_with("test\tmedium")).unwrap();
    assert!(hard.contains("gray") && !medium.contains("gray"));
}

#[test]
fn synth_is_deterministic_and_guards_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_synth(&tiny(), a.path(), false).unwrap();
    cmd_synth(&tiny(), b.path(), false).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    assert!(matches!(cmd_synth(&tiny(), a.path(), false), Err(Error::Usage(_))));
    cmd_synth(&tiny(), a.path(), true).unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    let other = tiny().with_seed(9).unwrap();
    cmd_synth(&other, b.path(), true).unwrap();
    assert_ne!(tree(a.path()), tree(b.path()));
}

#[test]
fn synth_extra_noise_variants() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.apply_text("tiers=easy\nnoise=occlusion:hard,salt_pepper:hard", "t").unwrap();
    cmd_synth(&cfg.finish().unwrap(), dir.path(), false).unwrap();
    for v in ["easy", "occlusion-hard", "salt_pepper-hard"] {
        assert!(dir.path().join("test").join(v).join("seq-01/img1/000001.png").is_file(), "{v}");
    }
    assert!(!dir.path().join("test/hard").exists());
}

/// One bright square drifting right over a dark background.
fn single_object_sequence(dir: &Path, frames: u32) {
    let mut imgs = Vec::new();
    let mut gt = Vec::new();
    for f in 1..=frames {
        let left = 8.0 + 1.5 * f as f64;
        let mut img = RgbImage::from_pixel(64, 48, Rgb([30, 40, 50]));
        for y in 14..24 {
            for x in left as u32..left as u32 + 10 {
                img.put_pixel(x, y, Rgb([220, 200, 120]));
            }
        }
        imgs.push(img);
        gt.push(MotRow { top: 14.0, left: left.floor(), ..boxed(f, 1, 0.0) });
    }
    write_sequence(dir, &imgs, &gt, 25).unwrap();
}

#[test]
fn training_reduces_loss_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    single_object_sequence(&dir.path().join("data/train/one"), 20);
    let mut cfg = tiny();
    cfg.apply_text("\nflip_prob=0\naffine_prob=0", "t").unwrap();
    cfg.train.epochs = 50;
    cfg.train.batch_size = 19;
    let cfg = cfg.finish().unwrap();
    let out = dir.path().join("run");
    let hist = cmd_train(&cfg, &dir.path().join("data"), &out).unwrap();
    assert!(hist.last().unwrap().total < hist[0].total, "{:?} -> {:?}", hist[0], hist.last());
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], LOSS_CSV_HEADER);
    assert_eq!(lines.len(), 51);
    assert!(lines[1..].iter().enumerate().all(|(i, l)| l.split(',').count() == 4 && l.starts_with(&format!("{},", i + 1))));
    assert!(out.join("model.ckpt").is_file() && out.join("best.ckpt").is_file());
    assert_eq!(RunConfig::load(&out.join(RESOLVED_NAME)).unwrap(), cfg);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    cmd_synth(&tiny(), &dir.path().join("data"), false).unwrap();
    let a = cmd_train(&tiny(), &dir.path().join("data"), &dir.path().join("a")).unwrap();
    let b = cmd_train(&tiny(), &dir.path().join("data"), &dir.path().join("b")).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.total - y.total).abs() < 1e-6 && (x.det - y.det).abs() < 1e-6 && (x.cva - y.cva).abs() < 1e-6);
    }
    assert_eq!(fs::read(dir.path().join("a/model.ckpt")).unwrap(), fs::read(dir.path().join("b/model.ckpt")).unwrap());
}

#[test]
fn track_range_render_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_synth(&tiny(), &data, false).unwrap();
    let run = dir.path().join("run");
    cmd_train(&tiny(), &data, &run).unwrap();
    let seq = data.join("test/easy/seq-01");
    let out = dir.path().join("pred/seq-01.txt");
    let render = dir.path().join("overlay");
    let mut cfg = tiny();
    cfg.tracker.score_threshold = 0.05;
    cfg.tracker.min_hits = 1;
    let rows = cmd_track(&cfg, &run.join("model.ckpt"), &seq, &out, Some(&render)).unwrap();
    assert!(rows.iter().all(|r| (1..=10).contains(&r.frame)));
    assert_eq!(read_mot(&out).unwrap().len(), rows.len());
    for i in 1..=10 {
        let img = image::open(render.join(format!("{i:06}.png"))).unwrap();
        assert_eq!((img.width(), img.height()), (64, 48));
    }
    assert_eq!(fs::read_dir(&render).unwrap().count(), 10);

    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let err = cmd_track(&cfg, &run.join("model.ckpt"), &empty, &out, None).unwrap_err();
    assert!(err.to_string().contains("no frames found"), "{err}");

    let mut wider = cfg.clone();
    wider.model.tfe.feat_channels = 12;
    let err = cmd_track(&wider, &run.join("model.ckpt"), &seq, &out, None).unwrap_err();
    assert!(matches!(err, Error::CheckpointMismatch(_)));
    assert!(err.to_string().contains("tfe.dec2"), "{err}");
}

#[test]
fn eval_reports_via_files() {
    let dir = tempfile::tempdir().unwrap();
    let gt = vec![boxed(1, 1, 0.0), boxed(1, 2, 40.0), boxed(2, 1, 0.0), boxed(2, 2, 40.0)];
    let swapped = vec![boxed(1, 1, 0.0), boxed(1, 2, 40.0), boxed(2, 2, 0.0), boxed(2, 1, 40.0)];
    let (g, p, s) = (dir.path().join("gt.txt"), dir.path().join("pred.txt"), dir.path().join("swap.txt"));
    write_mot(&gt, &g).unwrap();
    write_mot(&gt, &p).unwrap();
    write_mot(&swapped, &s).unwrap();
    let same = cmd_eval(&g, &p, None).unwrap().to_text();
    assert!(same.contains("mota=1.000000") && same.contains("idf1=1.000000"), "{same}");
    let report = dir.path().join("out/report.txt");
    let swap = cmd_eval(&g, &s, Some(&report)).unwrap().to_text();
    assert!(swap.contains("ids=2") && swap.contains("mota=0.500000"), "{swap}");
    assert_eq!(fs::read_to_string(&report).unwrap(), swap);
    let missing = dir.path().join("nope.txt");
    let err = cmd_eval(&g, &missing, None).unwrap_err();
    assert!(err.to_string().contains("nope.txt"));
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    write_mot(&[boxed(1, 1, 0.0)], &gt).unwrap();

    let ok = bin().args(["eval", "--gt"]).arg(&gt).arg("--pred").arg(&gt).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("mota=1.000000"));

    let usage = bin().args(["eval", "--bogus"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));

    let missing = bin().args(["eval", "--gt"]).arg(&gt).arg("--pred").arg(dir.path().join("absent.txt")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.txt"));

    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "epochs=3\nunknown_key=1\n").unwrap();
    let bad = bin().arg("--config").arg(&cfg).args(["synth", "--out"]).arg(dir.path().join("d")).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown_key"));

    fs::write(&cfg, "epochs=0\n").unwrap();
    let invalid = bin().arg("--config").arg(&cfg).args(["synth", "--out"]).arg(dir.path().join("d")).output().unwrap();
    assert_eq!(invalid.status.code(), Some(1));

    let no_config = bin().arg("--config").arg(dir.path().join("missing.txt")).args(["synth", "--out"]).arg(dir.path().join("d")).output().unwrap();
    assert_eq!(no_config.status.code(), Some(2));

    let nonempty = bin().args(["synth", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(nonempty.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&nonempty.stderr).contains("--force"));
}
