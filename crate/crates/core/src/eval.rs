//! Evaluation reports and inference output.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::raster::{write_raster, RasterDtype};
use crate::data::{load_checkpoint, load_dataset, load_sequence, SliceSequence};
use crate::error::{Error, Result};
use crate::losses::{dice_score, threshold};
use crate::model::{ModelConfig, SegModel, SequenceOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub index: usize,
    pub dice: f64,
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScores {
    pub sequence_id: String,
    pub slices: Vec<SliceScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub sequences: usize,
    pub slices: usize,
    pub corrupted_slices: usize,
}

/// Per-slice Dice plus population mean ± SD over all slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScores>,
    pub mean: f64,
    pub sd: f64,
    /// Mean Dice over corrupted slices, when any exist.
    pub corrupted_mean: Option<f64>,
    pub counts: Counts,
    pub k: usize,
    pub config: ModelConfig,
}

impl EvalReport {
    pub fn all_scores(&self) -> impl Iterator<Item = &SliceScore> {
        self.sequences.iter().flat_map(|s| s.slices.iter())
    }
}

/// Population mean and standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Scores `model` on in-memory sequences; every slice needs a mask.
pub fn evaluate_model(model: &SegModel, sequences: &[SliceSequence], opts: SequenceOptions) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let preds = model.predict_sequence(seq, opts)?;
        let mut slices = Vec::with_capacity(preds.len());
        for (t, (pred, slice)) in preds.iter().zip(&seq.slices).enumerate() {
            let gt = slice.mask.as_ref().ok_or_else(|| {
                Error::Evaluation(format!("sequence `{}` slice {t} has no mask", seq.sequence_id))
            })?;
            slices.push(SliceScore {
                index: t,
                dice: dice_score(&threshold(&pred.probabilities), gt)?,
                corrupted: slice.corrupted,
            });
        }
        scores.push(SequenceScores {
            sequence_id: seq.sequence_id.clone(),
            slices,
        });
    }
    let all: Vec<f64> = scores.iter().flat_map(|s| s.slices.iter().map(|x| x.dice)).collect();
    let corrupted: Vec<f64> = scores
        .iter()
        .flat_map(|s| s.slices.iter().filter(|x| x.corrupted).map(|x| x.dice))
        .collect();
    let (mean, sd) = mean_sd(&all);
    Ok(EvalReport {
        counts: Counts {
            sequences: scores.len(),
            slices: all.len(),
            corrupted_slices: corrupted.len(),
        },
        sequences: scores,
        mean,
        sd,
        corrupted_mean: (!corrupted.is_empty()).then(|| mean_sd(&corrupted).0),
        k: opts.k,
        config: model.config().clone(),
    })
}

/// Loads a checkpoint and scores it on a dataset directory. Neither input is modified.
pub fn evaluate(dataset_dir: &Path, checkpoint: &Path) -> Result<EvalReport> {
    let model = load_checkpoint(checkpoint)?;
    let sequences = load_dataset(dataset_dir)?;
    if sequences.is_empty() {
        return Err(Error::Evaluation(format!("no sequences under {}", dataset_dir.display())));
    }
    evaluate_model(&model, &sequences, SequenceOptions::from(model.config()))
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn prediction_file(t: usize) -> String {
    format!("pred_{t}.psr")
}

/// Segments one sequence directory and writes `pred_<t>.psr` u8 masks (0/1).
pub fn infer(checkpoint: &Path, sequence_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint(checkpoint)?;
    let seq = load_sequence(sequence_dir)?;
    let preds = model.predict_sequence(&seq, SequenceOptions::from(model.config()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::with_capacity(preds.len());
    for (t, p) in preds.iter().enumerate() {
        let path = out_dir.join(prediction_file(t));
        write_raster(&path, &threshold(&p.probabilities), RasterDtype::U8)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_statistics() {
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_sd(&[0.4]), (0.4, 0.0));
    }
}
