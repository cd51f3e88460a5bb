//! Slice sequences, on-disk formats and the synthetic dataset generator.
//!
//! Dataset layout: `<root>/<sequence_id>/{sequence.json, slice_<t>.psr, mask_<t>.psr}`.

pub mod checkpoint;
pub mod raster;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use raster::{read_raster, write_raster, RasterDtype};
pub use synth::{generate_dataset, SynthConfig};

/// Scale of similarity-estimated distances, in micrometres.
pub const DISTANCE_SCALE_UM: f64 = 10.0;

pub const SEQUENCE_FILE: &str = "sequence.json";

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    /// `H×W×C`, values in `[0, 1]`.
    pub image: Tensor,
    /// Binary `H×W` ground truth.
    pub mask: Option<Tensor>,
    pub z_position_um: Option<f64>,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSequence {
    pub sequence_id: String,
    pub slices: Vec<Slice>,
}

impl SliceSequence {
    pub fn new(sequence_id: impl Into<String>, slices: Vec<Slice>) -> Result<Self> {
        let seq = Self {
            sequence_id: sequence_id.into(),
            slices,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.slices.first() else {
            return Ok(());
        };
        let shape = first.image.shape();
        let mut last_z: Option<f64> = None;
        for s in &self.slices {
            if s.image.shape() != shape {
                return Err(Error::dim("slice_sequence", shape, s.image.shape()));
            }
            if let Some(m) = &s.mask {
                if m.shape() != &shape[..2] {
                    return Err(Error::dim("slice_sequence", &shape[..2], m.shape()));
                }
            }
            if let Some(z) = s.z_position_um {
                if !z.is_finite() || z < 0.0 {
                    return Err(Error::Config(format!("z position {z} must be finite and >= 0")));
                }
                if let Some(prev) = last_z {
                    if z <= prev {
                        return Err(Error::Config(format!(
                            "z positions must increase strictly ({prev} then {z}) in `{}`",
                            self.sequence_id
                        )));
                    }
                }
                last_z = Some(z);
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// `c · (1 - cos(F_i, F_j))` with `c` = [`DISTANCE_SCALE_UM`]; zero vectors give `c`.
pub fn estimate_distance(fi: &[f64], fj: &[f64]) -> Result<f64> {
    let cos = cosine_sim(fi, fj)?;
    if cos.degenerate {
        return Ok(DISTANCE_SCALE_UM);
    }
    Ok((DISTANCE_SCALE_UM * (1.0 - cos.value)).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMeta {
    pub image: String,
    pub mask: Option<String>,
    pub z_position_um: Option<f64>,
    pub corrupted: bool,
}

/// Contents of `sequence.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub sequence_id: String,
    pub slices: Vec<SliceMeta>,
}

pub fn slice_file(t: usize) -> String {
    format!("slice_{t}.psr")
}

pub fn mask_file(t: usize) -> String {
    format!("mask_{t}.psr")
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sequence_meta(dir: &Path) -> Result<SequenceMeta> {
    let bytes = read_file(&dir.join(SEQUENCE_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads one sequence directory.
pub fn load_sequence(dir: &Path) -> Result<SliceSequence> {
    let meta = read_sequence_meta(dir)?;
    let mut slices = Vec::with_capacity(meta.slices.len());
    for s in &meta.slices {
        let image = read_raster(&dir.join(&s.image))?;
        let mask = match &s.mask {
            Some(m) => {
                let t = read_raster(&dir.join(m))?;
                let (h, w) = (t.shape()[0], t.shape()[1]);
                Some(t.reshape(&[h, w])?)
            }
            None => None,
        };
        slices.push(Slice {
            image,
            mask,
            z_position_um: s.z_position_um,
            corrupted: s.corrupted,
        });
    }
    SliceSequence::new(meta.sequence_id, slices)
}

/// Sequence directories under `root` (those holding `sequence.json`), sorted by name.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && path.join(SEQUENCE_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<SliceSequence>> {
    sequence_dirs(root)?.iter().map(|d| load_sequence(d)).collect()
}
