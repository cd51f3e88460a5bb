//! Segmentation losses and the Dice metric.
//!
//! Each loss has a graph form used in training and a plain form over
//! tensors. The plain forms are written out directly from the formulas and
//! serve as an independent check of the graph forms.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cosine_sim, Tensor};

pub const BCE_CLIP: f64 = 1e-7;
pub const EVAL_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_dice: f64,
    pub w_bce: f64,
    pub w_consistency: f64,
    pub smooth: f64,
    pub consistency_threshold: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_dice: 1.0,
            w_bce: 0.5,
            w_consistency: 0.2,
            smooth: 1.0,
            consistency_threshold: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_dice", self.w_dice),
            ("w_bce", self.w_bce),
            ("w_consistency", self.w_consistency),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.smooth.is_finite() && self.smooth > 0.0) {
            return Err(Error::Config("smooth must be > 0".into()));
        }
        let tau = self.consistency_threshold;
        if !(tau > -1.0 && tau <= 1.0) {
            return Err(Error::Config(format!("consistency_threshold {tau} outside (-1, 1]")));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_probabilities(op: &'static str, p: &Tensor) -> Result<()> {
    if p.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::domain(op, "probabilities must lie in [0, 1]"));
    }
    Ok(())
}

fn check_binary(op: &'static str, y: &Tensor) -> Result<()> {
    if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(op, "mask must be binary"));
    }
    Ok(())
}

/// `1 - (2Σpy + ε) / (Σp + Σy + ε)`.
pub fn dice_loss(p: &Tensor, y: &Tensor, smooth: f64) -> Result<f64> {
    same_shape("dice_loss", p, y)?;
    check_probabilities("dice_loss", p)?;
    check_binary("dice_loss", y)?;
    let inter: f64 = p.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    Ok(1.0 - (2.0 * inter + smooth) / (p.sum() + y.sum() + smooth))
}

/// Mean binary cross-entropy with `p` clipped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape("bce_loss", p, y)?;
    check_probabilities("bce_loss", p)?;
    check_binary("bce_loss", y)?;
    let total: f64 = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&pv, &yv)| {
            let pc = pv.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            -(yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln())
        })
        .sum();
    Ok(total / p.len() as f64)
}

/// Similarity-weighted mean squared discrepancy over slice pairs whose
/// embedding similarity exceeds `tau`; 0 when no pair qualifies.
pub fn consistency_loss(preds: &[Tensor], embeddings: &[Tensor], tau: f64) -> Result<f64> {
    if preds.len() != embeddings.len() {
        return Err(Error::contract(
            "consistency_loss",
            format!("{} predictions but {} embeddings", preds.len(), embeddings.len()),
        ));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            let sim = cosine_sim(embeddings[i].data(), embeddings[j].data())?.value;
            if sim > tau {
                same_shape("consistency_loss", &preds[i], &preds[j])?;
                let mse = preds[i]
                    .data()
                    .iter()
                    .zip(preds[j].data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / preds[i].len() as f64;
                total += sim * mse;
                pairs += 1;
            }
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Per-term values of a combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    pub consistency: f64,
}

/// `mean_t(w_dice·dice_t + w_bce·bce_t) + w_consistency·consistency`.
pub fn combined_loss(preds: &[Tensor], targets: &[Tensor], embeddings: &[Tensor], w: &LossWeights) -> Result<LossBreakdown> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract("combined_loss", "need one target per prediction"));
    }
    let n = preds.len() as f64;
    let mut dice = 0.0;
    let mut bce = 0.0;
    for (p, y) in preds.iter().zip(targets) {
        dice += dice_loss(p, y, w.smooth)?;
        bce += bce_loss(p, y)?;
    }
    let (dice, bce) = (dice / n, bce / n);
    let consistency = consistency_loss(preds, embeddings, w.consistency_threshold)?;
    Ok(LossBreakdown {
        total: w.w_dice * dice + w.w_bce * bce + w.w_consistency * consistency,
        dice,
        bce,
        consistency,
    })
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both masks are empty.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("dice_score", pred, gt)?;
    check_binary("dice_score", pred)?;
    check_binary("dice_score", gt)?;
    let inter: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
    let total = pred.sum() + gt.sum();
    Ok(if total == 0.0 { 1.0 } else { 2.0 * inter / total })
}

pub fn threshold(probs: &Tensor) -> Tensor {
    probs.map(|p| if p >= EVAL_THRESHOLD { 1.0 } else { 0.0 })
}

pub fn dice_loss_graph(g: &mut Graph, p: Var, y: Var, smooth: f64) -> Result<Var> {
    let py = g.mul(p, y)?;
    let inter = g.sum(py);
    let sp = g.sum(p);
    let sy = g.sum(y);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, smooth);
    let den = g.add(sp, sy)?;
    let den = g.add_scalar(den, smooth);
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

pub fn bce_loss_graph(g: &mut Graph, p: Var, y: &Tensor) -> Result<Var> {
    if g.shape(p) != y.shape() {
        return Err(Error::dim("bce_loss", g.shape(p), y.shape()));
    }
    let pc = g.clamp(p, BCE_CLIP, 1.0 - BCE_CLIP);
    let log_p = g.ln(pc)?;
    let q = g.scale(pc, -1.0);
    let q = g.add_scalar(q, 1.0);
    let log_q = g.ln(q)?;
    let yv = g.constant(y.clone());
    let not_y = g.constant(y.map(|v| 1.0 - v));
    let a = g.mul(yv, log_p)?;
    let b = g.mul(not_y, log_q)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Slice pairs `(i, j, sim)` with `i < j` whose embedding similarity exceeds `tau`.
pub fn consistency_pairs(embeddings: &[Tensor], tau: f64) -> Result<Vec<(usize, usize, f64)>> {
    let mut pairs = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let sim = cosine_sim(embeddings[i].data(), embeddings[j].data())?.value;
            if sim > tau {
                pairs.push((i, j, sim));
            }
        }
    }
    Ok(pairs)
}

/// Graph form of [`consistency_loss`] over precomputed pairs. The pair
/// weights are plain numbers, so no gradient reaches the embeddings.
pub fn consistency_loss_graph(g: &mut Graph, preds: &[Var], pairs: &[(usize, usize, f64)]) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(i, j, sim) in pairs {
        let (pi, pj) = match (preds.get(i), preds.get(j)) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::contract("consistency_loss", format!("pair ({i}, {j}) out of range"))),
        };
        let d = g.sub(pi, pj)?;
        let sq = g.square(d);
        let m = g.mean(sq);
        terms.push(g.scale(m, sim));
    }
    let n = terms.len() as f64;
    let stacked = g.concat(&terms)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / n))
}

/// Graph handles of a combined loss.
#[derive(Debug, Clone, Copy)]
pub struct CombinedLoss {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
    pub consistency: Var,
}

impl CombinedLoss {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            total: g.scalar_value(self.total),
            dice: g.scalar_value(self.dice),
            bce: g.scalar_value(self.bce),
            consistency: g.scalar_value(self.consistency),
        }
    }
}

pub fn combined_loss_graph(
    g: &mut Graph,
    preds: &[Var],
    targets: &[Tensor],
    embeddings: &[Tensor],
    w: &LossWeights,
) -> Result<CombinedLoss> {
    if preds.len() != embeddings.len() {
        return Err(Error::contract(
            "consistency_loss",
            format!("{} predictions but {} embeddings", preds.len(), embeddings.len()),
        ));
    }
    let pairs = consistency_pairs(embeddings, w.consistency_threshold)?;
    combined_loss_graph_with_pairs(g, preds, targets, &pairs, w)
}

/// [`combined_loss_graph`] with the consistency pairs fixed by the caller.
pub fn combined_loss_graph_with_pairs(
    g: &mut Graph,
    preds: &[Var],
    targets: &[Tensor],
    pairs: &[(usize, usize, f64)],
    w: &LossWeights,
) -> Result<CombinedLoss> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::contract("combined_loss", "need one target per prediction"));
    }
    let n = preds.len() as f64;
    let mut dice_terms = Vec::with_capacity(preds.len());
    let mut bce_terms = Vec::with_capacity(preds.len());
    for (&p, y) in preds.iter().zip(targets) {
        check_binary("combined_loss", y)?;
        let yv = g.constant(y.clone());
        dice_terms.push(dice_loss_graph(g, p, yv, w.smooth)?);
        bce_terms.push(bce_loss_graph(g, p, y)?);
    }
    let dice = g.concat(&dice_terms)?;
    let dice = g.sum(dice);
    let dice = g.scale(dice, 1.0 / n);
    let bce = g.concat(&bce_terms)?;
    let bce = g.sum(bce);
    let bce = g.scale(bce, 1.0 / n);
    let consistency = consistency_loss_graph(g, preds, pairs)?;
    let a = g.scale(dice, w.w_dice);
    let b = g.scale(bce, w.w_bce);
    let c = g.scale(consistency, w.w_consistency);
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(CombinedLoss {
        total,
        dice,
        bce,
        consistency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8], w: usize) -> Tensor {
        Tensor::new(&[bits.len() / w, w], bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn dice_loss_examples() {
        let ones = Tensor::ones(&[4, 4]);
        assert_eq!(dice_loss(&ones, &ones, 1.0).unwrap(), 0.0);
        let left = mask(&[1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0], 4);
        let right = left.map(|v| 1.0 - v);
        assert!((dice_loss(&left, &right, 1.0).unwrap() - 16.0 / 17.0).abs() < 1e-15);
        let z = Tensor::zeros(&[4, 4]);
        assert_eq!(dice_loss(&z, &z, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn bce_examples() {
        let y = mask(&[0, 1, 1, 0], 2);
        assert!((bce_loss(&Tensor::full(&[2, 2], 0.5), &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(&y, &y).unwrap() <= 1e-6);
        let p = Tensor::full(&[1, 1], 0.9);
        assert!((bce_loss(&p, &Tensor::ones(&[1, 1])).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn consistency_examples() {
        let e = Tensor::vector(vec![1.0, 0.0]);
        let p = Tensor::full(&[2, 2], 0.3);
        assert_eq!(consistency_loss(&[p.clone(), p.clone(), p.clone()], &[e.clone(), e.clone(), e.clone()], 0.7).unwrap(), 0.0);
        assert_eq!(consistency_loss(&[p], &[e.clone()], 0.7).unwrap(), 0.0);
        // embeddings at cosine 0.9
        let e2 = Tensor::vector(vec![0.9, (1.0f64 - 0.81).sqrt()]);
        let c = consistency_loss(&[Tensor::ones(&[2, 2]), Tensor::zeros(&[2, 2])], &[e, e2], 0.7).unwrap();
        assert!((c - 0.9).abs() < 1e-12);
    }

    #[test]
    fn consistency_length_mismatch() {
        let e = Tensor::vector(vec![1.0]);
        assert!(matches!(
            consistency_loss(&[Tensor::ones(&[1, 1])], &[e.clone(), e], 0.7),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn dice_score_examples() {
        let a = mask(&[1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0], 4);
        assert_eq!(dice_score(&a, &a).unwrap(), 1.0);
        let b = a.map(|v| 1.0 - v);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);
        let c = mask(&[0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0], 4);
        assert_eq!(dice_score(&a, &c).unwrap(), 0.5);
        let z = Tensor::zeros(&[4, 4]);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        assert!(dice_score(&Tensor::full(&[4, 4], 0.5), &a).is_err());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(dice_loss(&a, &b, 1.0), Err(Error::Dimension { .. })));
        assert!(matches!(bce_loss(&a, &b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.w_dice, w.w_bce, w.w_consistency), (1.0, 0.5, 0.2));
        assert_eq!(w.smooth, 1.0);
        assert_eq!(w.consistency_threshold, 0.7);
    }

    #[test]
    fn graph_forms_match_plain_forms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 3;
        let preds: Vec<Tensor> = (0..n)
            .map(|_| Tensor::new(&[4, 4], (0..16).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap())
            .collect();
        let targets: Vec<Tensor> = (0..n)
            .map(|_| Tensor::new(&[4, 4], (0..16).map(|_| rng.random_range(0..2) as f64).collect()).unwrap())
            .collect();
        let base = Tensor::randn(&[6], 1.0, &mut rng);
        let embeddings: Vec<Tensor> = (0..n)
            .map(|_| base.add(&Tensor::randn(&[6], 0.3, &mut rng)).unwrap())
            .collect();
        let w = LossWeights::default();
        let plain = combined_loss(&preds, &targets, &embeddings, &w).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = preds.iter().map(|p| g.leaf(p.clone(), true)).collect();
        let graph = combined_loss_graph(&mut g, &vars, &targets, &embeddings, &w).unwrap().breakdown(&g);
        assert!((plain.total - graph.total).abs() <= 1e-12);
        assert!((plain.dice - graph.dice).abs() <= 1e-12);
        assert!((plain.bce - graph.bce).abs() <= 1e-12);
        assert!((plain.consistency - graph.consistency).abs() <= 1e-12);
        assert!(plain.consistency > 0.0, "fixture should produce at least one similar pair");
    }

    #[test]
    fn gradients_wrt_probabilities_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let preds: Vec<Tensor> = (0..3)
            .map(|_| Tensor::new(&[3, 3], (0..9).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap())
            .collect();
        let targets: Vec<Tensor> = (0..3)
            .map(|_| Tensor::new(&[3, 3], (0..9).map(|_| rng.random_range(0..2) as f64).collect()).unwrap())
            .collect();
        let base = Tensor::randn(&[5], 1.0, &mut rng);
        let emb: Vec<Tensor> = (0..3).map(|_| base.add(&Tensor::randn(&[5], 0.2, &mut rng)).unwrap()).collect();
        let w = LossWeights::default();
        let pairs = consistency_pairs(&emb, w.consistency_threshold).unwrap();
        assert!(!pairs.is_empty());
        let run = |ps: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), true)).collect();
            let l = combined_loss_graph_with_pairs(&mut g, &vars, &targets, &pairs, &w).unwrap();
            let grads = g.backward(l.total).unwrap();
            let gs: Vec<Vec<f64>> = vars.iter().map(|&v| grads.wrt(v).unwrap().to_vec()).collect();
            (g.scalar_value(l.total), gs)
        };
        let (_, analytic) = run(&preds);
        let h = 1e-4;
        for s in 0..3 {
            for i in 0..9 {
                let mut plus = preds.clone();
                plus[s].data_mut()[i] += h;
                let mut minus = preds.clone();
                minus[s].data_mut()[i] -= h;
                let num = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let an = analytic[s][i];
                let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
                assert!(rel <= 1e-3, "slice {s} pixel {i}: {an} vs {num}");
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn case() -> impl Strategy<Value = (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
            (1usize..5, 1usize..6).prop_flat_map(|(n, side)| {
                let px = side * side;
                (
                    proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, px), n),
                    proptest::collection::vec(proptest::collection::vec(0u8..2, px), n),
                    proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), n),
                )
                    .prop_map(move |(p, y, e)| {
                        let p = p.into_iter().map(|v| Tensor::new(&[side, side], v).unwrap()).collect();
                        let y = y
                            .into_iter()
                            .map(|v| Tensor::new(&[side, side], v.into_iter().map(f64::from).collect()).unwrap())
                            .collect();
                        let e = e.into_iter().map(|v| Tensor::new(&[4], v).unwrap()).collect();
                        (p, y, e)
                    })
            })
        }

        proptest! {
            #[test]
            fn ranges_and_symmetry((p, y, e) in case()) {
                for (pi, yi) in p.iter().zip(&y) {
                    let d = dice_loss(pi, yi, 1.0).unwrap();
                    prop_assert!((0.0..1.0).contains(&d));
                    prop_assert!(bce_loss(pi, yi).unwrap() >= 0.0);
                    let t = threshold(pi);
                    prop_assert_eq!(dice_score(&t, yi).unwrap(), dice_score(yi, &t).unwrap());
                }
                prop_assert!(consistency_loss(&p, &e, 0.7).unwrap() >= 0.0);
            }

            #[test]
            fn consistency_ignores_slice_order((p, _y, e) in case()) {
                let forward = consistency_loss(&p, &e, 0.3).unwrap();
                let (mut rp, mut re) = (p.clone(), e.clone());
                rp.reverse();
                re.reverse();
                let backward = consistency_loss(&rp, &re, 0.3).unwrap();
                prop_assert!((forward - backward).abs() <= 1e-12);
            }

            #[test]
            fn zero_consistency_weight_is_the_per_slice_mean((p, y, e) in case()) {
                let w = LossWeights { w_consistency: 0.0, ..LossWeights::default() };
                let b = combined_loss(&p, &y, &e, &w).unwrap();
                let n = p.len() as f64;
                let mut acc = 0.0;
                for (pi, yi) in p.iter().zip(&y) {
                    acc += dice_loss(pi, yi, 1.0).unwrap() + 0.5 * bce_loss(pi, yi).unwrap();
                }
                let direct = w.w_dice * b.dice + w.w_bce * b.bce;
                prop_assert_eq!(b.total, direct);
                prop_assert!((b.total - acc / n).abs() <= 1e-12);
            }
        }
    }
}
