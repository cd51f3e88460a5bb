//! Low-rank adapters on frozen projection matrices.
//!
//! The adapted projection is `W_eff = W + (alpha / r) · B · A` with `W`
//! frozen, `A: r×d_in` drawn from `N(0, 0.02²)` and `B: d_out×r` zeroed, so a
//! fresh adapter leaves the base projection unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_RANK: usize = 8;
pub const A_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`, trainable.
    pub a: Tensor,
    /// `d_out × r`, trainable.
    pub b: Tensor,
    /// `d_out × d_in`, frozen.
    pub base: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    /// Wraps a frozen `base` with a freshly initialised adapter.
    pub fn with_base(base: Tensor, rank: usize, alpha: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let (d_out, d_in) = base.dims2("init_lora")?;
        check_rank(rank, d_in, d_out)?;
        let a = Tensor::randn(&[rank, d_in], A_INIT_STD, rng).with_requires_grad(true);
        let b = Tensor::zeros(&[d_out, rank]).with_requires_grad(true);
        Ok(Self {
            a,
            b,
            base: base.with_requires_grad(false),
            rank,
            alpha,
        })
    }

    pub fn d_in(&self) -> usize {
        self.base.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.base.shape()[0]
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Trainable scalars: `r · (d_in + d_out)`.
    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `W + (alpha / r) · B · A`.
    pub fn merge(&self) -> Result<Tensor> {
        let delta = self.b.matmul(&self.a)?.scale(self.scale());
        self.base.add(&delta)
    }

    /// `x · Wᵀ + (alpha / r) · x · Aᵀ · Bᵀ`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(self.base.clone());
        let a = g.constant(self.a.clone());
        let b = g.constant(self.b.clone());
        let y = lora_linear(&mut g, xv, w, a, b, self.scale())?;
        Ok(g.value(y).clone())
    }
}

pub(crate) fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::contract(
            "init_lora",
            format!("rank {rank} must be in 1..={}", d_in.min(d_out)),
        ));
    }
    Ok(())
}

/// Seeded adapter with a random `N(0, 1/d_in)` base matrix.
pub fn init_lora(d_in: usize, d_out: usize, rank: usize, alpha: f64, seed: u64) -> Result<LoraAdapter> {
    check_rank(rank, d_in, d_out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Tensor::randn(&[d_out, d_in], (1.0 / d_in as f64).sqrt(), &mut rng);
    LoraAdapter::with_base(base, rank, alpha, &mut rng)
}

/// Adapted projection on the graph: `x·Wᵀ + scale · (x·Aᵀ)·Bᵀ`.
pub fn lora_linear(g: &mut Graph, x: Var, w: Var, a: Var, b: Var, scale: f64) -> Result<Var> {
    let base = g.linear(x, w)?;
    let down = g.linear(x, a)?;
    let up = g.linear(down, b)?;
    if g.shape(up) != g.shape(base) {
        return Err(Error::dim("lora_forward", g.shape(base), g.shape(up)));
    }
    let up = g.scale(up, scale);
    g.add(base, up)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rank_shapes() {
        let ad = init_lora(64, 64, DEFAULT_RANK, 8.0, 1).unwrap();
        assert_eq!(ad.a.shape(), &[8, 64]);
        assert_eq!(ad.b.shape(), &[64, 8]);
        assert!(ad.b.data().iter().all(|&v| v == 0.0));
        assert_eq!(ad.trainable_params(), 8 * (64 + 64));
    }

    #[test]
    fn init_is_deterministic() {
        assert_eq!(init_lora(16, 12, 4, 4.0, 9).unwrap(), init_lora(16, 12, 4, 4.0, 9).unwrap());
        assert_ne!(init_lora(16, 12, 4, 4.0, 9).unwrap(), init_lora(16, 12, 4, 4.0, 10).unwrap());
    }

    #[test]
    fn rank_bound_is_checked() {
        assert!(init_lora(6, 4, 5, 5.0, 0).is_err());
        assert!(init_lora(6, 4, 0, 1.0, 0).is_err());
        assert!(init_lora(6, 4, 4, 4.0, 0).is_ok());
    }

    #[test]
    fn fresh_adapter_is_exactly_the_base() {
        let ad = init_lora(8, 6, 2, 2.0, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let y = ad.forward(&x).unwrap();
        let mut g = Graph::new();
        let (xv, w) = (g.constant(x.clone()), g.constant(ad.base.clone()));
        let base = g.linear(xv, w).unwrap();
        assert_eq!(&y, g.value(base));
        assert_eq!(ad.merge().unwrap(), ad.base);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut ad = init_lora(8, 6, 2, 2.0, 3).unwrap();
        ad.b = Tensor::ones(&[6, 2]);
        let y = ad.forward(&Tensor::zeros(&[3, 8])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_merge_adds_outer_product() {
        let base = Tensor::zeros(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ad = LoraAdapter::with_base(base, 1, 1.0, &mut rng).unwrap();
        ad.a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        ad.b = Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(ad.merge().unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn seeded_adapter_matches_merged_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base = Tensor::randn(&[5, 6], 1.0, &mut rng);
        let mut ad = LoraAdapter::with_base(base, 2, 2.0, &mut rng).unwrap();
        ad.b = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let merged = x.matmul(&ad.merge().unwrap().transpose().unwrap()).unwrap();
        assert!(ad.forward(&x).unwrap().max_abs_diff(&merged) <= 1e-10);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let ad = init_lora(8, 6, 2, 2.0, 3).unwrap();
        assert!(matches!(ad.forward(&Tensor::zeros(&[2, 7])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ad = init_lora(6, 5, 3, 4.0, 11).unwrap();
        ad.b = Tensor::randn(&[5, 3], 0.5, &mut rng);
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let r = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let loss = |a: &Tensor, b: &Tensor| -> (f64, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w = g.constant(ad.base.clone());
            let (av, bv) = (g.leaf(a.clone(), true), g.leaf(b.clone(), true));
            let y = lora_linear(&mut g, xv, w, av, bv, ad.scale()).unwrap();
            let rv = g.constant(r.clone());
            let yr = g.mul(y, rv).unwrap();
            let l = g.sum(yr);
            let grads = g.backward(l).unwrap();
            (g.scalar_value(l), grads.wrt(av).unwrap().to_vec(), grads.wrt(bv).unwrap().to_vec())
        };
        let (_, ga, gb) = loss(&ad.a, &ad.b);
        let h = 1e-4;
        for (which, analytic) in [(0, ga), (1, gb)] {
            for (i, &an) in analytic.iter().enumerate() {
                let (mut ap, mut bp) = (ad.a.clone(), ad.b.clone());
                let (mut am, mut bm) = (ad.a.clone(), ad.b.clone());
                if which == 0 {
                    ap.data_mut()[i] += h;
                    am.data_mut()[i] -= h;
                } else {
                    bp.data_mut()[i] += h;
                    bm.data_mut()[i] -= h;
                }
                let num = (loss(&ap, &bp).0 - loss(&am, &bm).0) / (2.0 * h);
                let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-6);
                assert!(rel <= 1e-3, "factor {which} element {i}: {an} vs {num}");
            }
        }
    }

    #[test]
    fn base_gets_no_gradient() {
        let ad = init_lora(4, 4, 2, 2.0, 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 4]));
        let w = g.leaf(ad.base.clone(), ad.base.requires_grad());
        let (a, b) = (g.leaf(ad.a.clone(), true), g.leaf(ad.b.clone(), true));
        let y = lora_linear(&mut g, x, w, a, b, ad.scale()).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(w).is_none());
        assert!(grads.wrt(a).is_some());
    }
}
