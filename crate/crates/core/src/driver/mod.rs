//! Command-line front end.

mod config;

pub use config::{apply_override, BenchConfig, RunConfig, SweepConfig, RESOLVED_CONFIG};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use crate::analysis::toy::write_toy_corpus;
use crate::analysis::{emit_rd_plot, rd_sweep, speaker_probe, ProbeOptions, ProbeReport, ProbeTarget};
use crate::conversion::{
    convert_utterance, linearity_check, ConversionMetadata, ConversionMode, ConversionRequest, Granularity,
};
use crate::error::{Error, Result};
use crate::features::{build_dataset, extract_mel, format, read_wav_mono, Dataset, MelUtterance, SpeakerId, SpeakerVocab};
use crate::model::Model;
use crate::trainer::{load_checkpoint, train, train_with, Checkpoint, Trainer};

#[derive(Debug, Parser)]
#[command(name = "cdhvae", version, about = "Hierarchical VAE voice conversion on log-mel spectrograms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run seed; every random stream derives from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mean,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Invariant,
    Dependent,
    Raw,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract features from `<corpus>/<speaker>/*.wav` into a dataset.
    Prepare {
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a prepared dataset.
    Train {
        /// Dataset directory or manifest.
        data: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Convert a mel file (or WAV) from one speaker to another.
    Convert {
        checkpoint: PathBuf,
        input: PathBuf,
        /// Source speaker name; defaults to the label stored in a mel file.
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        target: String,
        #[arg(long, value_enum, default_value = "mean")]
        mode: ModeArg,
        /// Convert the whole utterance in one pass instead of by segment.
        #[arg(long)]
        utterance_wise: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model per beta and emit a rate-distortion table and plot.
    RdSweep {
        data: PathBuf,
        /// Comma-separated betas; overrides `sweep.betas`.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[command(flatten)]
        common: Common,
    },
    /// Speaker-classification probe on latents or features.
    Probe {
        checkpoint: PathBuf,
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        target: ProbeArg,
        /// Also run each probe with permuted labels.
        #[arg(long)]
        permuted: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Time conversion and check it is linear in the segment count.
    Bench {
        /// Model to time; a freshly initialized one from the config if absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic multi-speaker corpus as WAV files.
    ToyCorpus {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Prepare { common, .. }
            | Command::Train { common, .. }
            | Command::Convert { common, .. }
            | Command::RdSweep { common, .. }
            | Command::Probe { common, .. }
            | Command::Bench { common, .. }
            | Command::ToyCorpus { common } => common,
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    if let Command::RdSweep { betas: Some(b), .. } = &cli.command {
        cfg.sweep.betas = b.clone();
    }
    let out = common.out.as_path();
    cfg.persist(out)?;
    match cli.command {
        Command::Prepare { corpus, .. } => cmd_prepare(&corpus, &cfg, out).map(drop),
        Command::Train { data, resume, .. } => cmd_train(&data, resume.as_deref(), &cfg, out).map(drop),
        Command::Convert {
            checkpoint,
            input,
            source,
            target,
            mode,
            utterance_wise,
            ..
        } => {
            let mode = match mode {
                ModeArg::Mean => ConversionMode::Mean,
                ModeArg::Sampled => ConversionMode::Sampled {
                    seed: crate::seed::sub_seed(cfg.seed, "convert"),
                },
            };
            let granularity = if utterance_wise { Granularity::Utterance } else { Granularity::Segment };
            cmd_convert(&checkpoint, &input, source.as_deref(), &target, mode, granularity, out).map(drop)
        }
        Command::RdSweep { data, .. } => cmd_rd_sweep(&data, &cfg, out),
        Command::Probe {
            checkpoint,
            data,
            target,
            permuted,
            ..
        } => cmd_probe(&checkpoint, &data, target, permuted, &cfg, out).map(drop),
        Command::Bench { checkpoint, .. } => cmd_bench(checkpoint.as_deref(), &cfg, out),
        Command::ToyCorpus { .. } => {
            write_toy_corpus(&cfg.toy, out)?;
            println!(
                "wrote {} speakers x {} utterances to {}",
                cfg.toy.speakers,
                cfg.toy.utterances_per_speaker,
                out.display()
            );
            Ok(())
        }
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn cmd_prepare(corpus: &Path, cfg: &RunConfig, out: &Path) -> Result<Dataset> {
    if !corpus.is_dir() {
        return Err(Error::invalid(format!("corpus directory {} not found", corpus.display())));
    }
    let ds = build_dataset(corpus, &cfg.mel, cfg.model.segment_frames)?;
    let manifest = ds.save(out)?;
    println!(
        "{} segments from {} utterances, {} speakers -> {}",
        ds.len(),
        ds.utterances().len(),
        ds.vocab().len(),
        manifest.display()
    );
    Ok(ds)
}

pub fn cmd_train(data: &Path, resume: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<Checkpoint> {
    let ds = Dataset::load(data)?;
    let ckpt = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            ck.check_vocab(ds.vocab())?;
            if ck.meta.model_config != cfg.model {
                return Err(Error::config("resumed checkpoint has a different model configuration"));
            }
            info!("resuming from epoch {}", ck.meta.epoch);
            train_with(Trainer::resume(ck, cfg.train.clone())?, &ds, Some(out))?
        }
        None => {
            let model = Model::<f32>::init(cfg.model.clone(), ds.vocab().len(), cfg.model_init_seed())?;
            info!("model with {} parameters", model.params().numel());
            train(model, &ds, &cfg.train, Some(out))?
        }
    };
    if let Some(last) = ckpt.meta.history.last() {
        println!(
            "epoch {}: loss {:.4} rate {:.4} distortion {:.4}",
            last.epoch, last.loss, last.rate, last.distortion
        );
    }
    Ok(ckpt)
}

fn speaker(vocab: &SpeakerVocab, name: &str) -> Result<SpeakerId> {
    vocab
        .id(name)
        .ok_or_else(|| Error::invalid(format!("unknown speaker {name:?}; known speakers: {}", vocab.names().join(", "))))
}

pub fn cmd_convert(
    checkpoint: &Path,
    input: &Path,
    source: Option<&str>,
    target: &str,
    mode: ConversionMode,
    granularity: Granularity,
    out: &Path,
) -> Result<PathBuf> {
    let ck = load_checkpoint(checkpoint)?;
    let vocab = &ck.meta.vocab;
    let y_t = speaker(vocab, target)?;
    let is_wav = input.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
    let (mel, label) = if is_wav {
        let (samples, sr) = read_wav_mono(input)?;
        (extract_mel(&samples, sr, &ck.meta.mel_params, SpeakerId(0), "")?.mel, None)
    } else {
        format::read(input)?
    };
    let y_s = match (source, label) {
        (Some(name), _) => speaker(vocab, name)?,
        (None, Some(id)) => {
            vocab.check(id)?;
            id
        }
        (None, None) => return Err(Error::invalid("source speaker unknown; pass --source")),
    };
    let norm = ck.meta.normalization;
    let source_id = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    let req = ConversionRequest {
        source: MelUtterance {
            mel: norm.normalize(&mel),
            speaker: y_s,
            source_id: source_id.clone(),
        },
        source_speaker: y_s,
        target_speaker: y_t,
        mode,
        granularity,
    };
    let model = ck.inference_model();
    let converted = convert_utterance(&model, &req)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(format!("{source_id}_to_{target}.mel"));
    format::write(&path, &norm.denormalize(&converted.mel), Some(y_t))?;
    let meta = ConversionMetadata {
        source_id,
        source_speaker: vocab.name(y_s).expect("checked").to_string(),
        target_speaker: target.to_string(),
        mode,
        granularity,
        frames: converted.frames(),
        model_checksum: ck.model_checksum(),
    };
    write_json(&path.with_extension("json"), &meta)?;
    println!("{} frames -> {}", converted.frames(), path.display());
    Ok(path)
}

pub fn cmd_rd_sweep(data: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = Dataset::load(data)?;
    let sweep = rd_sweep(&ds, &cfg.model, &cfg.sweep.betas, &cfg.train, &cfg.sweep.options(), Some(out))?;
    let (table, plot) = emit_rd_plot(&sweep, &out.join("rd"))?;
    print!("{}", crate::analysis::render_rd_table(&sweep));
    if !sweep.is_monotone() {
        println!("note: rate/distortion are not monotone in beta on this sweep");
    }
    println!("table {} plot {}", table.display(), plot.display());
    Ok(())
}

pub fn cmd_probe(
    checkpoint: &Path,
    data: &Path,
    target: ProbeArg,
    permuted: bool,
    cfg: &RunConfig,
    out: &Path,
) -> Result<Vec<ProbeReport>> {
    let ck = load_checkpoint(checkpoint)?;
    let ds = Dataset::load(data)?;
    ck.check_vocab(ds.vocab())?;
    let model = ck.inference_model();
    let targets: Vec<ProbeTarget> = match target {
        ProbeArg::Invariant => vec![ProbeTarget::InvariantLatents],
        ProbeArg::Dependent => vec![ProbeTarget::DependentLatents],
        ProbeArg::Raw => vec![ProbeTarget::RawMel],
        ProbeArg::All if model.config().split < model.config().latent_groups => {
            vec![ProbeTarget::InvariantLatents, ProbeTarget::DependentLatents, ProbeTarget::RawMel]
        }
        ProbeArg::All => vec![ProbeTarget::InvariantLatents, ProbeTarget::RawMel],
    };
    let mut reports = Vec::new();
    for t in targets {
        for perm in [false, true].into_iter().filter(|&p| !p || permuted) {
            let opts = ProbeOptions {
                permute_labels: perm,
                ..cfg.probe.clone()
            };
            let r = speaker_probe(&model, &ds, t, &opts)?;
            println!(
                "{:?}{}: accuracy {:.3} (chance {:.3} +/- {:.3}, {} test segments)",
                r.target,
                if perm { " [permuted]" } else { "" },
                r.accuracy,
                r.chance,
                r.chance_standard_error,
                r.test_count
            );
            reports.push(r);
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join("probe.json"), &reports)?;
    Ok(reports)
}

pub fn cmd_bench(checkpoint: Option<&Path>, cfg: &RunConfig, out: &Path) -> Result<()> {
    let (model, frame_period) = match checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.inference_model(), ck.meta.mel_params.frame_period())
        }
        None => (
            Model::<f32>::init(cfg.model.clone(), 2, cfg.model_init_seed())?,
            cfg.mel.frame_period(),
        ),
    };
    let r = linearity_check(
        &model,
        cfg.bench.segments,
        cfg.bench.repeats,
        frame_period,
        crate::seed::sub_seed(cfg.seed, "bench"),
    )?;
    println!(
        "{} segments: {:.4} s/segment ({:.4} s per second of speech, std {:.4} s over {} repeats)",
        r.small.segments,
        r.small.seconds_per_segment,
        r.small.seconds_per_speech_second,
        r.small.std_total,
        r.small.repeats
    );
    println!(
        "{} segments: {:.4} s/segment; time ratio {:.3} ({})",
        r.large.segments,
        r.large.seconds_per_segment,
        r.ratio,
        if r.linear { "linear" } else { "not linear" }
    );
    println!(
        "reference: {:.3} s/segment on the original hardware (context only)",
        r.small.reference_seconds_per_segment
    );
    write_json(&out.join("bench.json"), &r)
}
