//! The beta-weighted ELBO and rate/distortion accounting.
//!
//! Rates and distortions are in nats per segment: KL terms are summed over
//! every latent element of a segment, and the distortion is the negative
//! log-likelihood of all `80 x T` values under the decoder's Gaussian.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::features::{Dataset, MelSegment, SpeakerId};
use crate::model::{batch_tensor, DiagonalGaussian, Model};
use crate::seed::{indexed_seed, Noise};
use crate::tensor::{lit, Real, Tensor};

/// Closed-form `KL(q || p)` summed over all elements, accumulated in `f64`.
pub fn kl_gaussian<T: Real>(q: &DiagonalGaussian<T>, p: &DiagonalGaussian<T>) -> Result<f64> {
    if q.shape() != p.shape() {
        return Err(Error::invalid(format!(
            "KL between shapes {:?} and {:?}",
            q.shape(),
            p.shape()
        )));
    }
    let f = |t: &Tensor<T>, i: usize| t.data()[i].to_f64().unwrap_or(f64::NAN);
    let mut acc = 0.0;
    for i in 0..q.mean.numel() {
        let (mq, lq, mp, lp) = (f(&q.mean, i), f(&q.log_variance, i), f(&p.mean, i), f(&p.log_variance, i));
        let d = mq - mp;
        acc += 0.5 * (lp - lq + (lq - lp).exp() + d * d * (-lp).exp() - 1.0);
    }
    Ok(acc)
}

/// One segment's (or a batch mean's) objective terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub per_level_kl: Vec<f64>,
    pub distortion: f64,
    pub loss: f64,
    pub beta: f64,
}

impl ObjectiveBreakdown {
    pub fn rate(&self) -> f64 {
        self.per_level_kl.iter().sum()
    }

    /// Rate of levels `1..=split` only.
    pub fn invariant_rate(&self, split: usize) -> f64 {
        self.per_level_kl.iter().take(split).sum()
    }
}

/// A point in the rate/distortion plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub beta: f64,
    /// Mean KL over all levels, nats per segment.
    pub rate: f64,
    /// Mean KL over levels `1..=K`.
    pub invariant_rate: f64,
    /// Mean negative log-likelihood, nats per segment.
    pub distortion: f64,
}

/// Objective nodes of one batch inside a graph.
pub(crate) struct ObjectiveGraph {
    pub loss: Var,
    pub kl: Vec<Var>,
    pub distortion: Var,
}

pub(crate) fn build_objective<T: Real>(
    m: &Model<T>,
    g: &mut Graph<T>,
    vars: &[Var],
    x: &Tensor<T>,
    ys: &[SpeakerId],
    beta: f64,
    seed: u64,
) -> Result<ObjectiveGraph> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be finite and >= 0, got {beta}")));
    }
    let mut noise = Noise::new(seed);
    let mut cx = m.ctx(g, vars);
    let terms = m.elbo_graph(&mut cx, x, ys, &mut noise)?;
    let b: T = lit(beta);
    let mut weighted: Vec<(Var, T)> = terms.kl.iter().map(|&k| (k, b)).collect();
    weighted.push((terms.distortion, T::one()));
    let per_sample = g.weighted_sum(&weighted);
    let loss = g.mean_batch(per_sample);
    Ok(ObjectiveGraph {
        loss,
        kl: terms.kl,
        distortion: terms.distortion,
    })
}

fn mean_of<T: Real>(t: &Tensor<T>) -> f64 {
    t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / t.numel() as f64
}

pub(crate) fn breakdown<T: Real>(g: &Graph<T>, obj: &ObjectiveGraph, beta: f64) -> Result<ObjectiveBreakdown> {
    let per_level_kl: Vec<f64> = obj.kl.iter().map(|&k| mean_of(g.value(k))).collect();
    let distortion = mean_of(g.value(obj.distortion));
    let loss = g.value(obj.loss).data()[0].to_f64().unwrap_or(f64::NAN);
    let b = ObjectiveBreakdown {
        per_level_kl,
        distortion,
        loss,
        beta,
    };
    if !loss.is_finite() {
        let levels: Vec<String> = b
            .per_level_kl
            .iter()
            .enumerate()
            .map(|(i, k)| format!("KL{}={k:.4e}", i + 1))
            .collect();
        return Err(Error::Numerical(format!(
            "non-finite loss {loss}; distortion={distortion:.4e}; {}",
            levels.join(" ")
        )));
    }
    Ok(b)
}

/// Batch-mean objective for `x: (b, 1, 80, T)` with one posterior sample
/// per segment drawn from `seed`.
pub fn elbo_beta_batch<T: Real>(
    m: &Model<T>,
    x: &Tensor<T>,
    ys: &[SpeakerId],
    beta: f64,
    seed: u64,
) -> Result<ObjectiveBreakdown> {
    let mut g = Graph::new();
    let vars = m.params().bind(&mut g, false);
    let obj = build_objective(m, &mut g, &vars, x, ys, beta, seed)?;
    breakdown(&g, &obj, beta)
}

/// Single-segment objective.
pub fn elbo_beta<T: Real>(m: &Model<T>, x: &MelSegment, y: SpeakerId, beta: f64, seed: u64) -> Result<ObjectiveBreakdown> {
    let xt = batch_tensor(&[x])?;
    elbo_beta_batch(m, &xt, &[y], beta, seed)
}

/// Batch-mean objective together with the gradient of the loss with respect
/// to every parameter (in [`crate::model::ParamStore`] order).
pub fn loss_with_gradients<T: Real>(
    m: &Model<T>,
    x: &Tensor<T>,
    ys: &[SpeakerId],
    beta: f64,
    seed: u64,
) -> Result<(ObjectiveBreakdown, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let vars = m.params().bind(&mut g, true);
    let obj = build_objective(m, &mut g, &vars, x, ys, beta, seed)?;
    let b = breakdown(&g, &obj, beta)?;
    let mut grads = g.backward(obj.loss);
    let out = vars
        .iter()
        .zip(m.params().tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((b, out))
}

/// Rate and distortion averaged per segment over `dataset`, with
/// `sample_count` posterior samples per segment.
pub fn rd_evaluate<T: Real>(m: &Model<T>, dataset: &Dataset, beta: f64, sample_count: usize, seed: u64) -> Result<RDPoint> {
    evaluate_segments(m, &dataset.segments(), beta, sample_count, seed)
}

pub fn evaluate_segments<T: Real>(
    m: &Model<T>,
    segments: &[MelSegment],
    beta: f64,
    sample_count: usize,
    seed: u64,
) -> Result<RDPoint> {
    if segments.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    if sample_count == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    const CHUNK: usize = 16;
    let split = m.config().split;
    let (mut rate, mut inv, mut dist) = (0.0, 0.0, 0.0);
    for (ci, chunk) in segments.chunks(CHUNK).enumerate() {
        let refs: Vec<&MelSegment> = chunk.iter().collect();
        let x = batch_tensor::<T>(&refs)?;
        let ys: Vec<SpeakerId> = chunk.iter().map(|s| s.speaker).collect();
        for s in 0..sample_count {
            let b = elbo_beta_batch(m, &x, &ys, beta, indexed_seed(seed, "rd_evaluate", (ci * sample_count + s) as u64))?;
            let w = chunk.len() as f64;
            rate += w * b.rate();
            inv += w * b.invariant_rate(split);
            dist += w * b.distortion;
        }
    }
    let n = (segments.len() * sample_count) as f64;
    Ok(RDPoint {
        beta,
        rate: rate / n,
        invariant_rate: inv / n,
        distortion: dist / n,
    })
}
