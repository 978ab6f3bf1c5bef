//! Linear speaker-classification probes on latents or raw features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Dataset, MelSegment};
use crate::model::{batch_tensor, Model};
use crate::seed::{indexed_seed, rng, sub_seed};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTarget {
    /// Posterior means of levels `1..=K`.
    InvariantLatents,
    /// Posterior means of levels `K+1..=L`.
    DependentLatents,
    RawMel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeOptions {
    pub test_fraction: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    /// Shuffle the labels first; the probe should then sit at chance.
    pub permute_labels: bool,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            test_fraction: 0.5,
            iterations: 300,
            learning_rate: 0.5,
            l2: 1e-3,
            permute_labels: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub target: ProbeTarget,
    pub accuracy: f64,
    pub chance: f64,
    pub speakers: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Binomial standard error of the accuracy under chance.
    pub chance_standard_error: f64,
    pub permuted: bool,
}

/// Flattened probe features for each segment, in order.
pub fn probe_features<T: Real>(m: &Model<T>, segments: &[MelSegment], target: ProbeTarget) -> Result<Vec<Vec<f64>>> {
    if target == ProbeTarget::RawMel {
        return Ok(segments.iter().map(|s| s.mel.data().iter().map(|&v| f64::from(v)).collect()).collect());
    }
    let k = m.config().split;
    if target == ProbeTarget::DependentLatents && k == m.config().latent_groups {
        return Err(Error::invalid("model has no speaker-dependent levels to probe"));
    }
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(16) {
        let refs: Vec<&MelSegment> = chunk.iter().collect();
        let x = batch_tensor::<T>(&refs)?;
        let ys: Vec<_> = chunk.iter().map(|s| s.speaker).collect();
        let z = m.encode_mean(&x, &ys)?.z;
        let groups = match target {
            ProbeTarget::InvariantLatents => &z.groups[..k],
            _ => &z.groups[k..],
        };
        for i in 0..chunk.len() {
            let mut f = Vec::new();
            for g in groups {
                f.extend(g.index_batch(i).data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)));
            }
            out.push(f);
        }
    }
    Ok(out)
}

/// Fits a multinomial logistic regression from probe features to speaker
/// labels on a stratified train split and reports held-out accuracy.
pub fn speaker_probe<T: Real>(m: &Model<T>, dataset: &Dataset, target: ProbeTarget, opts: &ProbeOptions) -> Result<ProbeReport> {
    let speakers = dataset.vocab().len();
    if speakers < 2 {
        return Err(Error::invalid("speaker probe needs at least two speakers"));
    }
    if !(opts.test_fraction > 0.0 && opts.test_fraction < 1.0) {
        return Err(Error::config("probe test fraction must lie in (0, 1)"));
    }
    let segments = dataset.segments();
    let feats = probe_features(m, &segments, target)?;
    let mut labels: Vec<usize> = segments.iter().map(|s| s.speaker.index()).collect();
    if opts.permute_labels {
        labels.shuffle(&mut rng(sub_seed(opts.seed, "probe/permute")));
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..speakers {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng(indexed_seed(opts.seed, "probe/split", c as u64)));
        let n_test = ((idx.len() as f64) * opts.test_fraction).round() as usize;
        let n_test = if idx.len() >= 2 { n_test.clamp(1, idx.len() - 1) } else { 0 };
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("too few segments for a probe split"));
    }
    let clf = Logistic::fit(&feats, &labels, &train, speakers, opts);
    let correct = test.iter().filter(|&&i| clf.predict(&feats[i]) == labels[i]).count();
    let chance = 1.0 / speakers as f64;
    Ok(ProbeReport {
        target,
        accuracy: correct as f64 / test.len() as f64,
        chance,
        speakers,
        train_count: train.len(),
        test_count: test.len(),
        chance_standard_error: (chance * (1.0 - chance) / test.len() as f64).sqrt(),
        permuted: opts.permute_labels,
    })
}

/// Standardized-input softmax regression trained by full-batch gradient
/// descent for a fixed number of iterations.
struct Logistic {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    w: Vec<f64>,
    b: Vec<f64>,
    classes: usize,
}

impl Logistic {
    fn fit(x: &[Vec<f64>], y: &[usize], rows: &[usize], classes: usize, opts: &ProbeOptions) -> Logistic {
        let d = x[rows[0]].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            mean.iter_mut().zip(&x[r]).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for &r in rows {
            var.iter_mut().zip(x[r].iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        let inv_std = var.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        let mut clf = Logistic {
            mean,
            inv_std,
            w: vec![0.0; classes * d],
            b: vec![0.0; classes],
            classes,
        };
        let xs: Vec<Vec<f64>> = rows.iter().map(|&r| clf.standardize(&x[r])).collect();
        let mut gw = vec![0.0; classes * d];
        let mut gb = vec![0.0; classes];
        for _ in 0..opts.iterations {
            gw.iter_mut().for_each(|v| *v = 0.0);
            gb.iter_mut().for_each(|v| *v = 0.0);
            for (xi, &r) in xs.iter().zip(rows) {
                let p = clf.probabilities(xi);
                for c in 0..classes {
                    let e = (p[c] - f64::from(u8::from(y[r] == c))) / n;
                    gb[c] += e;
                    gw[c * d..(c + 1) * d].iter_mut().zip(xi).for_each(|(g, v)| *g += e * v);
                }
            }
            for (w, g) in clf.w.iter_mut().zip(&gw) {
                *w -= opts.learning_rate * (g + opts.l2 * *w);
            }
            for (b, g) in clf.b.iter_mut().zip(&gb) {
                *b -= opts.learning_rate * g;
            }
        }
        clf
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn probabilities(&self, xs: &[f64]) -> Vec<f64> {
        let d = xs.len();
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| self.b[c] + self.w[c * d..(c + 1) * d].iter().zip(xs).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probabilities(&self.standardize(x));
        // lowest index wins ties so predictions are reproducible
        (0..self.classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> ProbeOptions {
        ProbeOptions::default()
    }

    #[test]
    fn separable_clusters_are_learned() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut noise = crate::seed::Noise::new(1);
        for i in 0..60 {
            let c = i % 3;
            let n = noise.standard_normal::<f64>(&[5]);
            x.push(n.data().iter().enumerate().map(|(j, v)| v * 0.3 + if j == c { 3.0 } else { 0.0 }).collect::<Vec<_>>());
            y.push(c);
        }
        let rows: Vec<usize> = (0..30).collect();
        let clf = Logistic::fit(&x, &y, &rows, 3, &opts());
        let acc = (30..60).filter(|&i| clf.predict(&x[i]) == y[i]).count();
        assert_eq!(acc, 30);
    }

    #[test]
    fn constant_features_do_not_break_standardization() {
        let x = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let y = vec![0, 1, 0, 1];
        let clf = Logistic::fit(&x, &y, &[0, 1, 2, 3], 2, &opts());
        assert_eq!(clf.predict(&[1.0, 0.0]), 0);
        assert_eq!(clf.predict(&[1.0, 1.0]), 1);
    }
}
