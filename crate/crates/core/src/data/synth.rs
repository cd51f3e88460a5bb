//! Synthetic sequential-slice dataset.
//!
//! Each sequence tracks 1–3 elliptical blobs through depth. Blob centres,
//! axes and orientation change linearly per micrometre, gaps between slices
//! are drawn from a range, every slice gets its own intensity jitter, and a
//! slice may be corrupted by heavy additive noise while its mask keeps the
//! clean geometry.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::raster::{write_raster, RasterDtype};
use super::{mask_file, slice_file, SequenceMeta, Slice, SliceMeta, SliceSequence, SEQUENCE_FILE};
use crate::error::{Error, Result};
use crate::rng::{indexed_substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_sequences: usize,
    pub slices_per_sequence: usize,
    pub image_size: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub z_spacing_min_um: f64,
    pub z_spacing_max_um: f64,
    /// Upper bound on blob centre drift, pixels per micrometre.
    pub drift_per_um: f64,
    /// Relative standard deviation of per-slice foreground/background intensity.
    pub intensity_jitter: f64,
    pub corrupt_prob: f64,
    pub noise_sigma: f64,
    pub corrupt_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sequences: 4,
            slices_per_sequence: 6,
            image_size: 64,
            blobs_min: 1,
            blobs_max: 3,
            z_spacing_min_um: 2.0,
            z_spacing_max_um: 40.0,
            drift_per_um: 0.05,
            intensity_jitter: 0.08,
            corrupt_prob: 0.0,
            noise_sigma: 0.03,
            corrupt_noise_sigma: 0.6,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 || self.slices_per_sequence == 0 || self.image_size == 0 {
            return Err(Error::Config("sequence, slice and image counts must be >= 1".into()));
        }
        if self.blobs_min == 0 || self.blobs_min > self.blobs_max {
            return Err(Error::Config(format!(
                "blob count range {}..={} is invalid",
                self.blobs_min, self.blobs_max
            )));
        }
        if !(0.0..=1.0).contains(&self.corrupt_prob) {
            return Err(Error::Config(format!("corrupt_prob {} outside [0, 1]", self.corrupt_prob)));
        }
        if !(self.z_spacing_min_um > 0.0 && self.z_spacing_min_um <= self.z_spacing_max_um) {
            return Err(Error::Config("z spacing range must be positive and ordered".into()));
        }
        for (name, v) in [
            ("drift_per_um", self.drift_per_um),
            ("intensity_jitter", self.intensity_jitter),
            ("noise_sigma", self.noise_sigma),
            ("corrupt_noise_sigma", self.corrupt_noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Ellipse in pixel coordinates; pixel `(x, y)` is sampled at its centre `(x+0.5, y+0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy)]
struct BlobTrack {
    start: Ellipse,
    vx: f64,
    vy: f64,
    growth: f64,
    spin: f64,
}

impl BlobTrack {
    fn at(&self, z: f64) -> Ellipse {
        let s = self.start;
        Ellipse {
            cx: s.cx + self.vx * z,
            cy: s.cy + self.vy * z,
            a: (s.a * (1.0 + self.growth * z)).clamp(3.0, 16.0),
            b: (s.b * (1.0 + self.growth * z)).clamp(3.0, 16.0),
            theta: s.theta + self.spin * z,
        }
    }
}

/// One generated sequence with the geometry and clean renders behind it.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub sequence: SliceSequence,
    pub geometry: Vec<Vec<Ellipse>>,
    pub clean_images: Vec<Tensor>,
}

pub fn sequence_id(index: usize) -> String {
    format!("seq_{index:03}")
}

/// Binary mask of the union of `blobs`, filled row by row from each
/// ellipse's horizontal extent.
pub fn rasterize(blobs: &[Ellipse], size: usize) -> Tensor {
    let mut mask = vec![0.0; size * size];
    for e in blobs {
        let (s, c) = e.theta.sin_cos();
        let (ia, ib) = (1.0 / (e.a * e.a), 1.0 / (e.b * e.b));
        // implicit form A dx² + B dx dy + C dy² <= 1
        let qa = c * c * ia + s * s * ib;
        let qb = 2.0 * c * s * (ia - ib);
        let qc = s * s * ia + c * c * ib;
        for y in 0..size {
            let dy = y as f64 + 0.5 - e.cy;
            let disc = qb * qb * dy * dy - 4.0 * qa * (qc * dy * dy - 1.0);
            if disc < 0.0 {
                continue;
            }
            let root = disc.sqrt();
            let lo = e.cx + (-qb * dy - root) / (2.0 * qa);
            let hi = e.cx + (-qb * dy + root) / (2.0 * qa);
            let x0 = (lo - 0.5).ceil().max(0.0);
            let x1 = (hi - 0.5).floor().min(size as f64 - 1.0);
            if x1 < x0 {
                continue;
            }
            for x in x0 as usize..=x1 as usize {
                mask[y * size + x] = 1.0;
            }
        }
    }
    Tensor::from_parts(vec![size, size], mask)
}

fn to_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Builds sequence `index` of the dataset described by `cfg`.
pub fn synthesize_sequence(cfg: &SynthConfig, index: usize) -> Result<SynthSequence> {
    cfg.validate()?;
    let mut rng = indexed_substream(cfg.seed, Stream::Synthesis, index as u64);
    let size = cfg.image_size as f64;
    let n_blobs = rng.random_range(cfg.blobs_min..=cfg.blobs_max);
    let tracks: Vec<BlobTrack> = (0..n_blobs)
        .map(|_| {
            let dir = rng.random_range(0.0..2.0 * PI);
            let speed = rng.random_range(0.0..=cfg.drift_per_um);
            BlobTrack {
                start: Ellipse {
                    cx: rng.random_range(0.22 * size..0.78 * size),
                    cy: rng.random_range(0.22 * size..0.78 * size),
                    a: rng.random_range(0.08 * size..0.17 * size),
                    b: rng.random_range(0.08 * size..0.17 * size),
                    theta: rng.random_range(0.0..PI),
                },
                vx: speed * dir.cos(),
                vy: speed * dir.sin(),
                growth: rng.random_range(-0.003..0.003),
                spin: rng.random_range(-0.005..0.005),
            }
        })
        .collect();

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let corrupt_noise = Normal::new(0.0, cfg.corrupt_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let jitter = Normal::new(0.0, cfg.intensity_jitter).map_err(|e| Error::Config(e.to_string()))?;

    let mut z = 0.0;
    let mut slices = Vec::with_capacity(cfg.slices_per_sequence);
    let mut geometry = Vec::with_capacity(cfg.slices_per_sequence);
    let mut clean_images = Vec::with_capacity(cfg.slices_per_sequence);
    for t in 0..cfg.slices_per_sequence {
        if t > 0 {
            z += rng.random_range(cfg.z_spacing_min_um..=cfg.z_spacing_max_um);
        }
        let blobs: Vec<Ellipse> = tracks.iter().map(|tr| tr.at(z)).collect();
        let mask = rasterize(&blobs, cfg.image_size);
        let bg = 0.2 * (1.0 + jitter.sample(&mut rng));
        let fg = 0.7 * (1.0 + jitter.sample(&mut rng));
        let clean: Vec<f64> = mask
            .data()
            .iter()
            .map(|&m| {
                let base = if m > 0.5 { fg } else { bg };
                (base + noise.sample(&mut rng)).clamp(0.0, 1.0)
            })
            .collect();
        let corrupted = rng.random::<f64>() < cfg.corrupt_prob;
        let pixels: Vec<f64> = if corrupted {
            clean
                .iter()
                .map(|&v| to_f32((v + corrupt_noise.sample(&mut rng)).clamp(0.0, 1.0)))
                .collect()
        } else {
            clean.iter().map(|&v| to_f32(v)).collect()
        };
        let clean = Tensor::from_parts(vec![cfg.image_size, cfg.image_size, 1], clean.into_iter().map(to_f32).collect());
        slices.push(Slice {
            image: Tensor::from_parts(vec![cfg.image_size, cfg.image_size, 1], pixels),
            mask: Some(mask),
            z_position_um: Some(z),
            corrupted,
        });
        geometry.push(blobs);
        clean_images.push(clean);
    }
    Ok(SynthSequence {
        sequence: SliceSequence::new(sequence_id(index), slices)?,
        geometry,
        clean_images,
    })
}

/// Writes one sequence directory under `root`.
pub fn write_sequence(root: &Path, seq: &SliceSequence) -> Result<()> {
    let dir = root.join(&seq.sequence_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut metas = Vec::with_capacity(seq.slices.len());
    for (t, s) in seq.slices.iter().enumerate() {
        write_raster(&dir.join(slice_file(t)), &s.image, RasterDtype::F32)?;
        let mask = match &s.mask {
            Some(m) => {
                write_raster(&dir.join(mask_file(t)), m, RasterDtype::U8)?;
                Some(mask_file(t))
            }
            None => None,
        };
        metas.push(SliceMeta {
            image: slice_file(t),
            mask,
            z_position_um: s.z_position_um,
            corrupted: s.corrupted,
        });
    }
    let meta = SequenceMeta {
        sequence_id: seq.sequence_id.clone(),
        slices: metas,
    };
    let mut json = serde_json::to_vec_pretty(&meta)?;
    json.push(b'\n');
    super::write_file(&dir.join(SEQUENCE_FILE), &json)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub sequences: usize,
    pub slices: usize,
    pub corrupted: usize,
}

/// Generates and writes the whole dataset; deterministic in `cfg.seed`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut summary = DatasetSummary {
        sequences: 0,
        slices: 0,
        corrupted: 0,
    };
    for i in 0..cfg.num_sequences {
        let s = synthesize_sequence(cfg, i)?;
        write_sequence(out_dir, &s.sequence)?;
        summary.sequences += 1;
        summary.slices += s.sequence.len();
        summary.corrupted += s.sequence.slices.iter().filter(|s| s.corrupted).count();
    }
    Ok(summary)
}

/// Peak signal-to-noise ratio for signals in `[0, 1]`.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}
