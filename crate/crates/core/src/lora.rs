//! Low-rank adapters over frozen linear projections.
//!
//! A projection `W ∈ R^{d_out×d_in}` is adapted as `W + (α/r)·B·A` with
//! `A ∈ R^{r×d_in}` and `B ∈ R^{d_out×r}`. `B` starts at zero so a fresh
//! adapter leaves the frozen projection's output unchanged.

use std::sync::Arc;

use rand::Rng;

use crate::bench::ledger::{self, Source};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::DropoutRng;

/// Standard deviation of the Gaussian used for `A` at initialization.
pub const LORA_INIT_STD: f64 = 0.02;

/// Frozen projection weight stored `[d_out×d_in]`.
#[derive(Clone, Debug)]
pub struct FrozenLinear<T> {
    weight: Arc<Tensor<T>>,
}

impl<T: Scalar> FrozenLinear<T> {
    pub fn new(weight: Tensor<T>) -> Result<Self> {
        weight.as_matrix("frozen_linear")?;
        Ok(Self { weight: Arc::new(weight) })
    }

    pub fn from_shared(weight: Arc<Tensor<T>>) -> Result<Self> {
        weight.as_matrix("frozen_linear")?;
        Ok(Self { weight })
    }

    pub fn randn<R: Rng + ?Sized>(d_out: usize, d_in: usize, std: f64, rng: &mut R) -> Self {
        Self { weight: Arc::new(Tensor::randn(vec![d_out, d_in], std, rng)) }
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn shared(&self) -> &Arc<Tensor<T>> {
        &self.weight
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Records the weight as a constant leaf without copying it.
    pub fn bind(&self, g: &mut Graph<T>) -> Var {
        g.constant_shared(&self.weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    alpha: f64,
    dropout_p: f64,
}

impl<T: Scalar> LoraAdapter<T> {
    /// `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn new<R: Rng + ?Sized>(
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        validate(d_in, d_out, rank, alpha, dropout_p)?;
        Ok(Self {
            a: Tensor::randn(vec![rank, d_in], LORA_INIT_STD, rng),
            b: Tensor::zeros(vec![d_out, rank]),
            alpha,
            dropout_p,
        })
    }

    pub fn from_parts(a: Tensor<T>, b: Tensor<T>, alpha: f64, dropout_p: f64) -> Result<Self> {
        let (rank, d_in) = a.as_matrix("lora A")?;
        let (d_out, rank_b) = b.as_matrix("lora B")?;
        if rank != rank_b {
            return Err(Error::Shape {
                op: "lora",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        validate(d_in, d_out, rank, alpha, dropout_p)?;
        Ok(Self { a, b, alpha, dropout_p })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    /// `α / r`
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Records `A` and `B` on the graph, trainable or not.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundLora {
        let (a, b) = if trainable {
            (g.param(self.a.clone()), g.param(self.b.clone()))
        } else {
            (g.constant(self.a.clone()), g.constant(self.b.clone()))
        };
        BoundLora {
            a,
            b,
            scale: self.scale(),
            dropout_p: self.dropout_p,
        }
    }

    /// `(α/r)·B·A·drop(x)` for each row of `x`.
    pub fn delta(&self, x: &Tensor<T>, dropout: Option<&mut DropoutRng>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = bound.delta(&mut g, xv, dropout)?;
        Ok(g.value(y).clone())
    }
}

fn validate(d_in: usize, d_out: usize, rank: usize, alpha: f64, dropout_p: f64) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "lora rank {rank} must lie in 1..=min({d_in}, {d_out})"
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("lora alpha must be positive, got {alpha}")));
    }
    if !(0.0..1.0).contains(&dropout_p) {
        return Err(Error::Config(format!("dropout_p must lie in [0, 1), got {dropout_p}")));
    }
    Ok(())
}

/// An adapter whose matrices are recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundLora {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
    pub dropout_p: f64,
}

impl BoundLora {
    /// Dropout is applied to the adapter input only, and only when an RNG is supplied.
    pub fn delta<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        dropout: Option<&mut DropoutRng>,
    ) -> Result<Var> {
        let _t = ledger::tag_source(Source::Lora);
        let input = match dropout {
            Some(rng) if self.dropout_p > 0.0 => {
                let mask = dropout_mask::<T>(g.shape(x).to_vec(), self.dropout_p, rng);
                g.mul_const(x, mask)?
            }
            _ => x,
        };
        let down = g.matmul_nt(input, self.a)?;
        let up = g.matmul_nt(down, self.b)?;
        Ok(g.scale(up, self.scale))
    }
}

/// Inverted-dropout mask: `0` with probability `p`, `1/(1-p)` otherwise.
pub(crate) fn dropout_mask<T: Scalar>(shape: Vec<usize>, p: f64, rng: &mut DropoutRng) -> Tensor<T> {
    let keep = T::from_f64(1.0 / (1.0 - p));
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Tensor::from_parts(shape, data)
}

/// `x·Wᵀ + lora_delta(x)` with the frozen product tagged as base work.
pub fn adapted_forward_on<T: Scalar>(
    g: &mut Graph<T>,
    weight: Var,
    lora: Option<&BoundLora>,
    x: Var,
    dropout: Option<&mut DropoutRng>,
) -> Result<Var> {
    let base = {
        let _t = ledger::tag_source(Source::Base);
        g.matmul_nt(x, weight)?
    };
    match lora {
        Some(l) => {
            let d = l.delta(g, x, dropout)?;
            g.add(base, d)
        }
        None => Ok(base),
    }
}

/// Frozen projection plus adapter delta applied to every row of `x`.
pub fn adapted_forward<T: Scalar>(
    base: &FrozenLinear<T>,
    adapter: &LoraAdapter<T>,
    x: &Tensor<T>,
    dropout: Option<&mut DropoutRng>,
) -> Result<Tensor<T>> {
    check_pair(base, adapter)?;
    let mut g = Graph::new();
    let w = base.bind(&mut g);
    let bound = adapter.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = adapted_forward_on(&mut g, w, Some(&bound), xv, dropout)?;
    Ok(g.value(y).clone())
}

/// `W + (α/r)·B·A`. The frozen weight is left untouched.
pub fn merged_weight<T: Scalar>(base: &FrozenLinear<T>, adapter: &LoraAdapter<T>) -> Result<Tensor<T>> {
    check_pair(base, adapter)?;
    let (d_out, d_in, r) = (base.d_out(), base.d_in(), adapter.rank());
    let scale = T::from_f64(adapter.scale());
    let mut data = base.weight().data().to_vec();
    for i in 0..d_out {
        for p in 0..r {
            let bip = adapter.b.get(i, p) * scale;
            for (o, &a) in data[i * d_in..(i + 1) * d_in].iter_mut().zip(adapter.a.row(p)) {
                *o += bip * a;
            }
        }
    }
    Tensor::new(vec![d_out, d_in], data)
}

fn check_pair<T: Scalar>(base: &FrozenLinear<T>, adapter: &LoraAdapter<T>) -> Result<()> {
    if base.d_in() != adapter.d_in() || base.d_out() != adapter.d_out() {
        return Err(Error::Shape {
            op: "lora",
            lhs: base.weight().shape().to_vec(),
            rhs: vec![adapter.d_out(), adapter.d_in()],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> DropoutRng {
        DropoutRng::seed_from_u64(5)
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let mut r = rng();
        let ad = LoraAdapter::<f64>::new(6, 4, 2, 4.0, 0.0, &mut r).unwrap();
        let x = Tensor::uniform(vec![3, 6], -1.0, 1.0, &mut r);
        let d = ad.delta(&x, None).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_delta() {
        let a = Tensor::<f64>::from_rows(&[&[1.0, 0.0]]);
        let b = Tensor::<f64>::from_rows(&[&[2.0], &[0.0]]);
        let ad = LoraAdapter::from_parts(a, b, 2.0, 0.0).unwrap();
        let x = Tensor::from_rows(&[&[3.0, 5.0]]);
        assert_eq!(ad.delta(&x, None).unwrap().data(), &[12.0, 0.0]);
    }

    #[test]
    fn delta_is_deterministic_without_dropout() {
        let mut r = rng();
        let mut ad = LoraAdapter::<f64>::new(5, 5, 2, 4.0, 0.0, &mut r).unwrap();
        ad.b = Tensor::uniform(vec![5, 2], -1.0, 1.0, &mut r);
        let x = Tensor::uniform(vec![2, 5], -1.0, 1.0, &mut r);
        let d1 = ad.delta(&x, Some(&mut r)).unwrap();
        let d2 = ad.delta(&x, Some(&mut r)).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn dropout_only_when_rng_supplied() {
        let mut r = rng();
        let mut ad = LoraAdapter::<f64>::new(8, 8, 2, 4.0, 0.5, &mut r).unwrap();
        ad.b = Tensor::uniform(vec![8, 2], -1.0, 1.0, &mut r);
        let x = Tensor::uniform(vec![4, 8], -1.0, 1.0, &mut r);
        let eval1 = ad.delta(&x, None).unwrap();
        let eval2 = ad.delta(&x, None).unwrap();
        assert_eq!(eval1, eval2);
        let train = ad.delta(&x, Some(&mut r)).unwrap();
        assert_ne!(train, eval1);
    }

    #[test]
    fn zero_b_gives_frozen_output_and_zero_input_gives_zero() {
        let mut r = rng();
        let base = FrozenLinear::<f64>::randn(4, 6, 1.0, &mut r);
        let ad = LoraAdapter::new(6, 4, 2, 4.0, 0.0, &mut r).unwrap();
        let x = Tensor::uniform(vec![3, 6], -1.0, 1.0, &mut r);
        let y = adapted_forward(&base, &ad, &x, None).unwrap();
        let mut g = Graph::new();
        let w = base.bind(&mut g);
        let xv = g.constant(x);
        let plain = g.matmul_nt(xv, w).unwrap();
        assert_eq!(&y, g.value(plain));

        let zero = Tensor::zeros(vec![2, 6]);
        let y0 = adapted_forward(&base, &ad, &zero, None).unwrap();
        assert!(y0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn merged_weight_matches_apply_path() {
        let mut r = rng();
        let base = FrozenLinear::<f64>::randn(7, 5, 1.0, &mut r);
        let mut ad = LoraAdapter::new(5, 7, 3, 6.0, 0.0, &mut r).unwrap();
        ad.b = Tensor::uniform(vec![7, 3], -1.0, 1.0, &mut r);
        let x = Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut r);
        let before = base.weight().clone();
        let merged = merged_weight(&base, &ad).unwrap();
        assert_eq!(base.weight(), &before);
        let mut g = Graph::new();
        let m = g.constant(merged);
        let xv = g.constant(x.clone());
        let via_merge = g.matmul_nt(xv, m).unwrap();
        let applied = adapted_forward(&base, &ad, &x, None).unwrap();
        assert!(applied.max_abs_diff(g.value(via_merge)) < 1e-10);
    }

    #[test]
    fn merged_weight_rank_one_outer_product() {
        let base = FrozenLinear::new(Tensor::<f64>::zeros(vec![2, 2])).unwrap();
        let ad = LoraAdapter::from_parts(
            Tensor::from_rows(&[&[1.0, 1.0]]),
            Tensor::from_rows(&[&[1.0], &[1.0]]),
            1.0,
            0.0,
        )
        .unwrap();
        assert_eq!(merged_weight(&base, &ad).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn rejects_invalid_hyperparameters_and_shapes() {
        let mut r = rng();
        assert!(LoraAdapter::<f64>::new(4, 4, 5, 1.0, 0.0, &mut r).is_err());
        assert!(LoraAdapter::<f64>::new(4, 4, 0, 1.0, 0.0, &mut r).is_err());
        assert!(LoraAdapter::<f64>::new(4, 4, 2, 0.0, 0.0, &mut r).is_err());
        assert!(LoraAdapter::<f64>::new(4, 4, 2, 1.0, 1.0, &mut r).is_err());
        let ad = LoraAdapter::<f64>::new(4, 3, 2, 1.0, 0.0, &mut r).unwrap();
        let base = FrozenLinear::<f64>::randn(3, 5, 1.0, &mut r);
        assert!(merged_weight(&base, &ad).is_err());
        assert!(ad.delta(&Tensor::zeros(vec![2, 5]), None).is_err());
    }
}
