use std::path::Path;
use std::process::{Command, Output};

use image::{Rgb, RgbImage};

use classaware::dataset::{read_manifest, write_manifest, ManifestImage, ManifestInstance};
use classaware::{ClassRelationMatrix, Domain};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_classaware"))
        .args(args)
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_dataset(dir: &Path, domain: Domain, count: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut entries = Vec::new();
    for i in 0..count {
        let file = format!("img{i}.png");
        let mut img = RgbImage::new(48, 32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = Rgb([(x * 5) as u8, (y * 7) as u8, (i * 40) as u8]);
        }
        img.save(dir.join(&file)).unwrap();
        entries.push(ManifestImage {
            id: format!("{domain}-{i}"),
            file,
            domain,
            instances: vec![
                ManifestInstance {
                    bbox: [2, 2, 16, 16],
                    class: 0,
                    label: None,
                    score: Some(0.95),
                },
                ManifestInstance {
                    bbox: [24, 8, 20, 20],
                    class: 1,
                    label: None,
                    score: Some(0.9),
                },
            ],
        });
    }
    write_manifest(dir, &entries).unwrap();
}

#[test]
fn augment_preview_with_zero_ratio_copies_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt, out) = (dir.path().join("src"), dir.path().join("tgt"), dir.path().join("out"));
    write_dataset(&src, Domain::Source, 3);
    write_dataset(&tgt, Domain::Target, 2);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"source_aug_ratio": 0.0, "target_aug_ratio": 0.0}"#).unwrap();

    let o = run(&[
        "augment-preview",
        "--config",
        path(&cfg),
        "--source-dir",
        path(&src),
        "--target-dir",
        path(&tgt),
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for (input, domain, n) in [(&src, "source", 3), (&tgt, "target", 2)] {
        for i in 0..n {
            let a = std::fs::read(input.join(format!("img{i}.png"))).unwrap();
            let b = std::fs::read(out.join(domain).join(format!("img{i}.png"))).unwrap();
            assert_eq!(a, b);
        }
        let manifest = read_manifest(&out.join(domain)).unwrap();
        assert_eq!(manifest.len(), n);
    }
}

#[test]
fn augment_preview_mixes_source_instances() {
    let dir = tempfile::tempdir().unwrap();
    let (src, out) = (dir.path().join("src"), dir.path().join("out"));
    write_dataset(&src, Domain::Source, 4);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"source_aug_ratio": 1.0, "seed": 3}"#).unwrap();

    // a cold-start matrix has no mix weights, so supply one
    let icrm = dir.path().join("icrm.json");
    ClassRelationMatrix::from_rows(&[vec![0.8, 0.2], vec![0.4, 0.6]])
        .unwrap()
        .save_json(&icrm)
        .unwrap();

    let o = run(&[
        "augment-preview",
        "--config",
        path(&cfg),
        "--icrm",
        path(&icrm),
        "--source-dir",
        path(&src),
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = read_manifest(&out.join("source")).unwrap();
    let mut soft = 0;
    for entry in &manifest {
        for inst in &entry.instances {
            if let Some(label) = &inst.label {
                let sum: f64 = label.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                soft += 1;
            }
        }
        // boxes are never moved
        assert_eq!(entry.instances[0].bbox, [2, 2, 16, 16]);
    }
    assert!(soft > 0);
}

#[test]
fn weights_dump_identity_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let icrm = dir.path().join("icrm.json");
    ClassRelationMatrix::identity(3).unwrap().save_json(&icrm).unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"num_classes": 3}"#).unwrap();
    let out = dir.path().join("out");

    let o = run(&["weights-dump", "--config", path(&cfg), "--icrm", path(&icrm), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout, std::fs::read_to_string(out.join("weights.csv")).unwrap());
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("gt,pred,raw,normalized,weight"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 9);
    for r in rows {
        assert_eq!(r[2], 0.0);
        assert_eq!(r[4], 1.0);
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"alpah": 0.9}"#).unwrap();
    let o = run(&["icrm-converge", "--config", path(&cfg), "--out", path(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpah"));
}

#[test]
fn out_of_range_class_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    write_dataset(&src, Domain::Source, 1);
    let mut manifest = read_manifest(&src).unwrap();
    manifest[0].instances[0].class = 5;
    write_manifest(&src, &manifest).unwrap();
    let o = run(&["augment-preview", "--source-dir", path(&src), "--out", path(&dir.path().join("out"))]);
    assert!(!o.status.success());
}
