//! Beta sweeps, speaker probes and rate-distortion plots.

mod plot;
mod probe;
pub mod toy;

pub use plot::{emit_rd_plot, read_rd_table, render_rd_svg, render_rd_table};
pub use probe::{probe_features, speaker_probe, ProbeOptions, ProbeReport, ProbeTarget};

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::model::{Model, ModelConfig};
use crate::objective::{rd_evaluate, RDPoint};
use crate::seed::{indexed_seed, rng, sub_seed};
use crate::trainer::{train, TrainConfig, FINAL_CHECKPOINT};

/// Splits utterances per speaker into train and held-out parts. Every
/// speaker with at least two utterances contributes at least one to each.
pub fn split_dataset(ds: &Dataset, heldout_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&heldout_fraction) || heldout_fraction == 0.0 {
        return Err(Error::config("held-out fraction must lie in (0, 1)"));
    }
    let mut train_idx = Vec::new();
    let mut held_idx = Vec::new();
    for (s, _) in ds.vocab().names().iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.utterances().len())
            .filter(|&i| ds.utterances()[i].speaker.index() == s)
            .collect();
        idx.shuffle(&mut rng(indexed_seed(seed, "split", s as u64)));
        let n = idx.len();
        let k = if n < 2 {
            0
        } else {
            ((n as f64 * heldout_fraction).round() as usize).clamp(1, n - 1)
        };
        held_idx.extend_from_slice(&idx[..k]);
        train_idx.extend_from_slice(&idx[k..]);
    }
    if held_idx.is_empty() {
        return Err(Error::invalid("dataset too small for a held-out split"));
    }
    train_idx.sort_unstable();
    held_idx.sort_unstable();
    Ok((ds.subset(&train_idx)?, ds.subset(&held_idx)?))
}

/// Short hex digest of the normalized features and labels.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for name in ds.vocab().names() {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for u in ds.utterances() {
        h.update(u.speaker.0.to_le_bytes());
        h.update((u.frames() as u64).to_le_bytes());
        for v in u.mel.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepOptions {
    pub heldout_fraction: f64,
    /// Posterior samples per held-out segment.
    pub eval_samples: usize,
    /// Re-train a point once with a fresh seed if it breaks monotonicity.
    pub retry: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            heldout_fraction: 0.25,
            eval_samples: 4,
            retry: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub rd: RDPoint,
    /// Seed the point was trained with; differs from the sweep seed after a retry.
    pub seed: u64,
    pub retried: bool,
    pub checkpoint: Option<PathBuf>,
    #[serde(skip)]
    pub model: Option<Model<f32>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub dataset_fingerprint: String,
    pub heldout_fingerprint: String,
    pub seed: u64,
}

impl SweepResult {
    pub fn betas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.beta).collect()
    }

    /// First adjacent pair `(i, i + 1)` where rate rises or distortion
    /// falls with beta.
    pub fn first_violation(&self) -> Option<usize> {
        self.points
            .windows(2)
            .position(|w| w[1].rd.rate > w[0].rd.rate || w[1].rd.distortion < w[0].rd.distortion)
    }

    pub fn is_monotone(&self) -> bool {
        self.first_violation().is_none()
    }
}

fn check_betas(betas: &[f64]) -> Result<()> {
    if betas.is_empty() {
        return Err(Error::config("sweep needs at least one beta"));
    }
    if betas.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
        return Err(Error::config("every beta must be finite and >= 0"));
    }
    if betas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("betas must be strictly increasing"));
    }
    Ok(())
}

/// Trains one model per beta on a shared split with shared seeds, then
/// evaluates each on the held-out part. With `out_dir`, each run gets a
/// subdirectory and the finished points are written after every run.
pub fn rd_sweep(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    betas: &[f64],
    train_cfg: &TrainConfig,
    opts: &SweepOptions,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    check_betas(betas)?;
    model_cfg.validate()?;
    train_cfg.validate()?;
    let seed = train_cfg.seed;
    let (train_ds, held) = split_dataset(dataset, opts.heldout_fraction, sub_seed(seed, "sweep/split"))?;
    info!(
        "sweep: {} train / {} held-out segments, betas {betas:?}",
        train_ds.len(),
        held.len()
    );
    let mut result = SweepResult {
        points: Vec::new(),
        dataset_fingerprint: dataset_fingerprint(dataset),
        heldout_fingerprint: dataset_fingerprint(&held),
        seed,
    };
    let run = |beta: f64, run_seed: u64, tag: &str| -> Result<SweepPoint> {
        let dir = out_dir.map(|d| d.join(format!("beta_{beta}{tag}")));
        let model = Model::<f32>::init(model_cfg.clone(), train_ds.vocab().len(), sub_seed(run_seed, "init"))?;
        let cfg = TrainConfig {
            beta,
            seed: sub_seed(run_seed, "train"),
            ..train_cfg.clone()
        };
        let ckpt = train(model, &train_ds, &cfg, dir.as_deref())?;
        let model = ckpt.inference_model();
        let rd = rd_evaluate(&model, &held, beta, opts.eval_samples, sub_seed(seed, "sweep/eval"))?;
        info!("beta {beta}: rate {:.3} distortion {:.3}", rd.rate, rd.distortion);
        Ok(SweepPoint {
            beta,
            rd,
            seed: run_seed,
            retried: !tag.is_empty(),
            checkpoint: dir.map(|d| d.join(FINAL_CHECKPOINT)),
            model: Some(model),
        })
    };
    let persist = |r: &SweepResult| -> Result<()> {
        if let Some(d) = out_dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join("sweep.json");
            let text = serde_json::to_string_pretty(r).map_err(|e| Error::invalid(e.to_string()))?;
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    };
    for &beta in betas {
        let point = match run(beta, seed, "") {
            Ok(p) => p,
            Err(e) => {
                persist(&result)?;
                return Err(e);
            }
        };
        result.points.push(point);
        persist(&result)?;
    }
    if opts.retry {
        let retry_seed = indexed_seed(seed, "sweep/retry", 1);
        while let Some(i) = result.first_violation() {
            // prefer re-running the later point of the offending pair
            let Some(j) = [i + 1, i].into_iter().find(|&j| !result.points[j].retried) else {
                break;
            };
            warn!("beta {} breaks monotonicity; retrying with a fresh seed", result.points[j].beta);
            result.points[j] = run(result.points[j].beta, retry_seed, "_retry")?;
            persist(&result)?;
        }
    }
    Ok(result)
}
