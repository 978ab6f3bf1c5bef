use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "model.latent_groups=2",
    "model.split=1",
    "model.scales=[{factor = 8, groups = 1}, {factor = 4, groups = 1}]",
    "model.segment_frames=16",
    "model.base_channels=4",
    "model.latent_channels=2",
    "model.speaker_embedding_dim=4",
    "toy.speakers=2",
    "toy.utterances_per_speaker=2",
    "toy.seconds=0.4",
    "train.batch_size=4",
    "bench.segments=2",
    "bench.repeats=1",
];

fn cdhvae(args: &[&str], out: &Path) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cdhvae"));
    cmd.args(args).arg("--out").arg(out).arg("--seed").arg("3");
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn toy_corpus_to_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (corpus, data, run, conv) = (root.join("corpus"), root.join("data"), root.join("run"), root.join("conv"));

    ok(&cdhvae(&["toy-corpus"], &corpus));
    assert!(corpus.join("spk0").is_dir());
    ok(&cdhvae(&["prepare", s(&corpus)], &data));
    assert!(data.join("manifest.toml").exists());

    let mut args = vec!["train", s(&data), "--set", "train.epochs=1"];
    ok(&cdhvae(&args, &run));
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.exists());
    assert!(run.join("resolved_config.toml").exists());
    assert_eq!(fs::read_to_string(run.join("train_log.tsv")).unwrap().lines().count(), 2);

    // resuming with a longer budget continues from epoch 1
    let resumed = root.join("resumed");
    args = vec!["train", s(&data), "--resume", s(&ckpt), "--set", "train.epochs=2"];
    ok(&cdhvae(&args, &resumed));
    let log = fs::read_to_string(resumed.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");

    let input = data.join("features").join("00000.mel");
    let convert = |out: &Path| cdhvae(&["convert", s(&ckpt), s(&input), "--target", "spk1"], out);
    ok(&convert(&conv));
    let first = fs::read(conv.join("00000_to_spk1.mel")).unwrap();
    ok(&convert(&conv));
    assert_eq!(fs::read(conv.join("00000_to_spk1.mel")).unwrap(), first);
    let meta = fs::read_to_string(conv.join("00000_to_spk1.json")).unwrap();
    assert!(meta.contains("\"target_speaker\": \"spk1\""));

    let wide = root.join("wide");
    ok(&cdhvae(&["convert", s(&ckpt), s(&input), "--target", "spk0", "--utterance-wise"], &wide));
    assert!(wide.join("00000_to_spk0.mel").exists());

    let bad = cdhvae(&["convert", s(&ckpt), s(&input), "--target", "nobody"], &conv);
    assert_eq!(bad.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("spk0"));

    let probe = root.join("probe");
    ok(&cdhvae(&["probe", s(&ckpt), s(&data), "--target", "raw", "--permuted"], &probe));
    assert!(probe.join("probe.json").exists());

    let bench = root.join("bench");
    ok(&cdhvae(&["bench", "--checkpoint", s(&ckpt)], &bench));
    assert!(bench.join("bench.json").exists());
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let missing = cdhvae(&["prepare", s(&dir.path().join("missing"))], &out);
    assert_eq!(missing.status.code(), Some(4));

    let unknown = cdhvae(&["bench", "--set", "train.epoch=3"], &out);
    assert_eq!(unknown.status.code(), Some(3));

    let seeded = cdhvae(&["bench", "--set", "train.seed=3"], &out);
    assert_eq!(seeded.status.code(), Some(3));

    let no_ckpt = cdhvae(&["convert", s(&dir.path().join("none.ckpt")), "x.mel", "--target", "a"], &out);
    assert_eq!(no_ckpt.status.code(), Some(6));

    let usage = Command::new(env!("CARGO_BIN_EXE_cdhvae")).arg("nonsense").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn shipped_configs_resolve() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.toml", "full_scale.toml"] {
        let cfg = cdhvae::driver::RunConfig::resolve(Some(&root.join(name)), &[], None);
        assert!(cfg.is_ok(), "{name}: {cfg:?}");
    }
    let desk = cdhvae::driver::RunConfig::resolve(Some(&root.join("desk.toml")), &[], None).unwrap();
    assert_eq!(desk.model, cdhvae::model::ModelConfig::desk());
}
