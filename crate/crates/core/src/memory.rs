//! Per-sequence memory of processed slices and similarity × confidence
//! top-K selection.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, Tensor};

/// Default number of memory slices attended to.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub slice_index: usize,
    pub pooled_embedding: Tensor,
    pub patch_features: Tensor,
    pub confidence: f64,
    pub z_position: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct MemoryBank {
    entries: Vec<MemoryEntry>,
}

/// Mean pixel margin `|2p - 1|` of a probability map.
pub fn prediction_confidence(probs: &Tensor) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::domain("prediction_confidence", "empty mask"));
    }
    let mut total = 0.0;
    for &p in probs.data() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::domain("prediction_confidence", format!("probability {p} outside [0, 1]")));
        }
        total += (2.0 * p - 1.0).abs();
    }
    Ok(total / probs.len() as f64)
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn reset(&mut self) {
        self.entries.clear();
    }

    pub fn insert(&mut self, entry: MemoryEntry) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if entry.slice_index <= last.slice_index {
                return Err(Error::contract(
                    "memory_insert",
                    format!("slice {} inserted after slice {}", entry.slice_index, last.slice_index),
                ));
            }
        }
        if !(0.0..=1.0).contains(&entry.confidence) {
            return Err(Error::contract(
                "memory_insert",
                format!("confidence {} outside [0, 1]", entry.confidence),
            ));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// Selection score `cos(F_j, F_t) · conf_j` of every entry before `current_index`.
    pub fn scores(&self, query: &[f64], current_index: usize) -> Result<Vec<(usize, f64)>> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.slice_index < current_index)
            .map(|(pos, e)| {
                let sim = cosine_sim(e.pooled_embedding.data(), query)?.value;
                Ok((pos, sim * e.confidence))
            })
            .collect()
    }

    /// Top-`k` entries by score, best first; ties go to the more recent slice.
    ///
    /// Embeddings are read as plain values, so the choice carries no gradient.
    pub fn select(&self, query: &[f64], current_index: usize, k: usize) -> Result<Vec<&MemoryEntry>> {
        if k < 1 {
            return Err(Error::contract("select_memory", "K must be >= 1"));
        }
        let mut scored = self.scores(query, current_index)?;
        scored.sort_by(|a, b| rank_order(a.1, self.entries[a.0].slice_index, b.1, self.entries[b.0].slice_index));
        scored.truncate(k);
        Ok(scored.into_iter().map(|(pos, _)| &self.entries[pos]).collect())
    }
}

/// Descending score, then descending slice index.
pub(crate) fn rank_order(score_a: f64, idx_a: usize, score_b: f64, idx_b: usize) -> Ordering {
    score_b.total_cmp(&score_a).then(idx_b.cmp(&idx_a))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(idx: usize, pooled: Vec<f64>, conf: f64) -> MemoryEntry {
        MemoryEntry {
            slice_index: idx,
            pooled_embedding: Tensor::vector(pooled),
            patch_features: Tensor::zeros(&[1, 1]),
            confidence: conf,
            z_position: None,
        }
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(prediction_confidence(&Tensor::full(&[4, 4], 0.5)).unwrap(), 0.0);
        let binary = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(prediction_confidence(&binary).unwrap(), 1.0);
        let half = Tensor::new(&[2, 2], vec![0.9, 0.9, 0.5, 0.5]).unwrap();
        assert!((prediction_confidence(&half).unwrap() - 0.4).abs() < 1e-15);
        assert!(prediction_confidence(&Tensor::full(&[2], 1.5)).is_err());
    }

    #[test]
    fn empty_bank_selects_nothing() {
        let bank = MemoryBank::new();
        assert!(bank.select(&[1.0, 0.0], 0, 5).unwrap().is_empty());
    }

    #[test]
    fn fewer_than_k_returns_all() {
        let mut bank = MemoryBank::new();
        for i in 0..3 {
            bank.insert(entry(i, vec![1.0, i as f64], 0.5)).unwrap();
        }
        assert_eq!(bank.select(&[1.0, 0.0], 3, 5).unwrap().len(), 3);
    }

    #[test]
    fn seven_entry_example_with_tie() {
        // query e0 and pooled e0 give sim 1, so the score is the confidence
        let scores = [0.9, 0.1, 0.85, 0.85, 0.2, 0.7, 0.3];
        let mut bank = MemoryBank::new();
        for (i, &s) in scores.iter().enumerate() {
            bank.insert(entry(i, vec![1.0, 0.0], s)).unwrap();
        }
        let picked: Vec<usize> = bank.select(&[1.0, 0.0], 7, 5).unwrap().iter().map(|e| e.slice_index).collect();
        assert_eq!(picked, vec![0, 3, 2, 5, 6]);
    }

    #[test]
    fn k_zero_is_a_contract_error() {
        let bank = MemoryBank::new();
        assert!(matches!(bank.select(&[1.0], 0, 0), Err(Error::Contract { .. })));
    }

    #[test]
    fn insert_order_is_enforced() {
        let mut bank = MemoryBank::new();
        bank.insert(entry(0, vec![1.0], 0.5)).unwrap();
        assert_eq!(bank.len(), 1);
        bank.insert(entry(1, vec![1.0], 0.5)).unwrap();
        bank.insert(entry(2, vec![1.0], 0.5)).unwrap();
        assert_eq!(bank.len(), 3);
        assert!(bank.insert(entry(2, vec![1.0], 0.5)).is_err());
        let mut other = MemoryBank::new();
        other.insert(entry(1, vec![1.0], 0.5)).unwrap();
        assert!(matches!(other.insert(entry(1, vec![1.0], 0.5)), Err(Error::Contract { .. })));
    }

    #[test]
    fn never_selects_current_or_later() {
        let mut bank = MemoryBank::new();
        for i in 0..6 {
            bank.insert(entry(i, vec![1.0, 0.1 * i as f64], 0.9)).unwrap();
        }
        for t in 0..7 {
            for e in bank.select(&[1.0, 0.3], t, 8).unwrap() {
                assert!(e.slice_index < t);
            }
        }
    }
}
