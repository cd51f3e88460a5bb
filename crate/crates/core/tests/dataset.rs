use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sliceseg::data::raster::read_raster;
use sliceseg::data::synth::{generate_dataset, psnr, synthesize_sequence, Ellipse, SynthConfig};
use sliceseg::data::{load_dataset, read_sequence_meta, sequence_dirs};

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for dir in sequence_dirs(root).unwrap() {
        for f in fs::read_dir(&dir).unwrap() {
            let p = f.unwrap().path();
            let key = p.strip_prefix(root).unwrap().display().to_string();
            out.insert(key, fs::read(&p).unwrap());
        }
    }
    out
}

/// Pixel-centre membership tested directly in the ellipse's own frame.
fn inside(e: &Ellipse, x: usize, y: usize) -> bool {
    let (dx, dy) = (x as f64 + 0.5 - e.cx, y as f64 + 0.5 - e.cy);
    let (s, c) = e.theta.sin_cos();
    let u = (dx * c + dy * s) / e.a;
    let v = (-dx * s + dy * c) / e.b;
    u * u + v * v <= 1.0
}

fn boundary_distance(e: &Ellipse, x: usize, y: usize) -> f64 {
    let (dx, dy) = (x as f64 + 0.5 - e.cx, y as f64 + 0.5 - e.cy);
    let (s, c) = e.theta.sin_cos();
    let u = (dx * c + dy * s) / e.a;
    let v = (-dx * s + dy * c) / e.b;
    (u * u + v * v - 1.0).abs()
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig::default();
    generate_dataset(&cfg, a.path()).unwrap();
    generate_dataset(&cfg, b.path()).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);

    let c = tempfile::tempdir().unwrap();
    generate_dataset(&SynthConfig { seed: 2, ..cfg }, c.path()).unwrap();
    assert_ne!(sa, snapshot(c.path()));
}

#[test]
fn four_by_six_file_counts() {
    let dir = tempfile::tempdir().unwrap();
    let summary = generate_dataset(&SynthConfig::default(), dir.path()).unwrap();
    assert_eq!((summary.sequences, summary.slices, summary.corrupted), (4, 24, 0));
    let files = snapshot(dir.path());
    let count = |prefix: &str| {
        files
            .keys()
            .filter(|k| Path::new(k).file_name().unwrap().to_str().unwrap().starts_with(prefix))
            .count()
    };
    assert_eq!(count("slice_"), 24);
    assert_eq!(count("mask_"), 24);
    assert_eq!(count("sequence.json"), 4);
    for d in sequence_dirs(dir.path()).unwrap() {
        let meta = read_sequence_meta(&d).unwrap();
        assert!(meta.slices.iter().all(|s| !s.corrupted));
        let z: Vec<f64> = meta.slices.iter().map(|s| s.z_position_um.unwrap()).collect();
        for w in z.windows(2) {
            let gap = w[1] - w[0];
            assert!((2.0..=40.0).contains(&gap), "gap {gap}");
        }
    }
}

#[test]
fn masks_match_per_pixel_oracle() {
    let cfg = SynthConfig {
        num_sequences: 12,
        ..SynthConfig::default()
    };
    let mut checked = 0;
    for i in 0..cfg.num_sequences {
        let s = synthesize_sequence(&cfg, i).unwrap();
        for (slice, blobs) in s.sequence.slices.iter().zip(&s.geometry) {
            let mask = slice.mask.as_ref().unwrap();
            for y in 0..cfg.image_size {
                for x in 0..cfg.image_size {
                    let expect = blobs.iter().any(|e| inside(e, x, y));
                    let got = mask.data()[y * cfg.image_size + x] == 1.0;
                    if expect != got {
                        // only rounding right on the boundary may disagree
                        let d = blobs.iter().map(|e| boundary_distance(e, x, y)).fold(f64::INFINITY, f64::min);
                        assert!(d < 1e-9, "seq {i} pixel ({x}, {y}) off by {d}");
                    }
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 12 * 6 * 64 * 64);
}

#[test]
fn corrupted_slices_are_noisy_but_keep_clean_masks() {
    let cfg = SynthConfig {
        num_sequences: 6,
        corrupt_prob: 0.5,
        ..SynthConfig::default()
    };
    let mut corrupted = 0;
    for i in 0..cfg.num_sequences {
        let s = synthesize_sequence(&cfg, i).unwrap();
        for ((slice, clean), blobs) in s.sequence.slices.iter().zip(&s.clean_images).zip(&s.geometry) {
            let p = psnr(&slice.image, clean);
            if slice.corrupted {
                corrupted += 1;
                assert!(p < 10.0, "corrupted slice psnr {p}");
            } else {
                assert!(p.is_infinite());
            }
            assert_eq!(slice.mask.as_ref().unwrap(), &sliceseg::data::synth::rasterize(blobs, cfg.image_size));
        }
    }
    assert!(corrupted > 0);
}

#[test]
fn written_dataset_loads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        corrupt_prob: 0.3,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), 4);
    for (i, seq) in loaded.iter().enumerate() {
        let s = synthesize_sequence(&cfg, i).unwrap();
        assert_eq!(seq, &s.sequence);
    }
    let img = read_raster(&dir.path().join("seq_000").join("slice_0.psr")).unwrap();
    assert_eq!(img.shape(), &[64, 64, 1]);
    assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for cfg in [
        SynthConfig {
            num_sequences: 0,
            ..SynthConfig::default()
        },
        SynthConfig {
            corrupt_prob: 1.5,
            ..SynthConfig::default()
        },
        SynthConfig {
            blobs_min: 4,
            blobs_max: 3,
            ..SynthConfig::default()
        },
    ] {
        assert!(matches!(generate_dataset(&cfg, dir.path()), Err(sliceseg::Error::Config(_))));
    }
}
