use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use cmpese::data::{load_cifar_binary, synth_dataset, write_cifar_binary, LabelLayout, Split};
use cmpese::diagnostics::{export_inner_images, write_excitations, EXCITATION_FILE, STATS_FILE};
use cmpese::network::{block_gradcheck, reference_count, BlockCheck};
use cmpese::train::{
    evaluate_topk, load_checkpoint, CheckpointMeta, CHECKPOINT_FILE, METRICS_FILE,
};
use cmpese::{
    capture_trace, param_count, stats, AttentionMode, Dataset, NetworkSpec, Precision, Real,
    SynthManifest, TrainConfig, Trainer,
};

const SEED_VAR: &str = "CMPESE_SEED";
const GRAD_TOLERANCE: f64 = 1e-4;
const PROBE_SAMPLES: usize = 4;

#[derive(Parser)]
#[command(
    name = "cmpese",
    version,
    about = "Competitive squeeze-and-excitation ResNets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML config; resumes from a matching checkpoint in the output directory
    Train { config: PathBuf },
    /// Top-1 and top-5 error of a checkpoint on a binary data file or synthetic manifest
    Eval { checkpoint: PathBuf, data: PathBuf },
    /// Parameter count of a network spec, with the published size when one is known
    ParamCount { netspec: PathBuf },
    /// Finite-difference check of one residual block per attention mode
    Gradcheck {
        #[arg(long)]
        mode: Option<AttentionMode>,
    },
    /// Excitation statistics and inner-image maps for a few samples
    ExportAttention {
        checkpoint: PathBuf,
        data: PathBuf,
        outdir: PathBuf,
    },
    /// Render a synthetic dataset manifest to binary record files
    SynthData { manifest: PathBuf },
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn parent(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn seed_override() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_VAR) {
        Ok(v) => {
            Ok(Some(v.trim().parse().with_context(|| {
                format!("{SEED_VAR}={v} is not an integer")
            })?))
        }
        Err(_) => Ok(None),
    }
}

fn train(config: &Path) -> anyhow::Result<()> {
    let mut cfg = TrainConfig::from_toml(&read(config)?)
        .with_context(|| format!("in {}", config.display()))?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    let base = parent(config);
    match cfg.precision {
        Precision::F32 => train_at::<f32>(cfg, base),
        Precision::F64 => train_at::<f64>(cfg, base),
    }
}

fn train_at<T: Real>(cfg: TrainConfig, base: &Path) -> anyhow::Result<()> {
    let out = base.join(&cfg.output);
    let total = cfg.total_epochs();
    let title = format!("{} ({})", cfg.network.name(), cfg.network.attention.mode);
    let mut trainer = Trainer::<T>::from_config(cfg, base)?.with_output(&out);
    let ckpt = out.join(CHECKPOINT_FILE);
    if ckpt.exists() {
        trainer
            .resume(&ckpt)
            .with_context(|| format!("cannot resume from {}", ckpt.display()))?;
        println!("resuming {title} after epoch {}", trainer.epoch());
    }
    println!(
        "training {title}: {} parameters, {} samples, {total} epochs",
        trainer.network().trainable_count(),
        trainer.train_set().len()
    );
    trainer.run_with(|m| {
        println!(
            "epoch {:>4}  lr {:<8.5}  loss {:.4}  train acc {:6.2}%  eval err {:6.2}%",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.eval_err
        )
    })?;
    println!("metrics written to {}", out.join(METRICS_FILE).display());
    Ok(())
}

/// Evaluation data: a synthetic manifest (`.toml`) or a binary record file in the checkpoint's format.
fn load_data(path: &Path, meta: &CheckpointMeta) -> anyhow::Result<Dataset> {
    let raw = if path.extension().is_some_and(|e| e == "toml") {
        let m = SynthManifest::from_toml(&read(path)?)
            .with_context(|| format!("in {}", path.display()))?;
        let split = if m.test_per_class > 0 {
            Split::Test
        } else {
            Split::Train
        };
        synth_dataset(&m, split)
    } else {
        load_cifar_binary(path, meta.data.format(), Split::Test)?
    };
    if raw.image_size != meta.network.input_size {
        bail!(
            "{} holds {1}×{1} images but the network expects {2}×{2}",
            path.display(),
            raw.image_size,
            meta.network.input_size
        );
    }
    Ok(raw.normalize(&meta.data.normalizer()))
}

fn open_checkpoint(path: &Path) -> anyhow::Result<(cmpese::Network<f32>, CheckpointMeta)> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn eval(checkpoint: &Path, data: &Path) -> anyhow::Result<()> {
    let (mut net, meta) = open_checkpoint(checkpoint)?;
    let ds = load_data(data, &meta)?;
    let top1 = evaluate_topk(&mut net, &ds, 100, 1)?;
    println!(
        "{} after {} epochs on {} samples",
        meta.network.name(),
        meta.epoch,
        ds.len()
    );
    println!("top-1 error: {top1:.2}%");
    if meta.network.num_classes > 5 {
        println!("top-5 error: {:.2}%", evaluate_topk(&mut net, &ds, 100, 5)?);
    }
    Ok(())
}

fn count(netspec: &Path) -> anyhow::Result<()> {
    let spec = NetworkSpec::from_toml(&read(netspec)?)
        .with_context(|| format!("in {}", netspec.display()))?;
    let n = param_count(&spec)?;
    println!(
        "{} {} (t={}): {n} parameters ({:.2}M)",
        spec.name(),
        spec.attention.mode,
        spec.attention.reduction,
        n as f64 / 1e6
    );
    if let Some(r) = reference_count(&spec) {
        println!(
            "reference: {:.2}M ({}), deviation {:+.2}%",
            r.millions,
            r.source,
            100.0 * r.deviation(n)
        );
    }
    Ok(())
}

fn gradcheck(mode: Option<AttentionMode>) -> anyhow::Result<bool> {
    let seed = seed_override()?.unwrap_or(0);
    let modes = mode.map_or(AttentionMode::ALL.to_vec(), |m| vec![m]);
    let mut ok = true;
    for m in modes {
        let r = block_gradcheck(m, BlockCheck::default(), seed)?;
        let pass = r.passed(GRAD_TOLERANCE);
        ok &= pass;
        println!(
            "{:<12} max rel error {:.3e}  {}",
            m.name(),
            r.max_rel_error,
            if pass { "ok" } else { "FAILED" }
        );
        if let Some(f) = &r.failure {
            println!("  non-finite value in {f}");
        }
    }
    Ok(ok)
}

fn export(checkpoint: &Path, data: &Path, outdir: &Path) -> anyhow::Result<()> {
    let (mut net, meta) = open_checkpoint(checkpoint)?;
    let ds = load_data(data, &meta)?;
    let idx: Vec<usize> = (0..ds.len().min(PROBE_SAMPLES)).collect();
    let (probe, _) = ds.batch(&idx)?;
    let trace = capture_trace(&mut net, &probe)?;
    fs::create_dir_all(outdir).with_context(|| format!("cannot create {}", outdir.display()))?;
    let mut written = vec![outdir.join(STATS_FILE)];
    stats(&trace).write_csv(&written[0])?;
    if meta.network.attention.mode.is_inner_imaging() {
        written.extend(export_inner_images(&trace, outdir)?);
    } else {
        let path = outdir.join(EXCITATION_FILE);
        write_excitations(&trace, &path)?;
        written.push(path);
    }
    println!("{} blocks, {} samples", trace.len(), idx.len());
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn synth(manifest: &Path) -> anyhow::Result<()> {
    let m = SynthManifest::from_toml(&read(manifest)?)
        .with_context(|| format!("in {}", manifest.display()))?;
    let out = parent(manifest).join(
        m.output
            .clone()
            .unwrap_or_else(|| PathBuf::from("synthetic")),
    );
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut splits = vec![(Split::Train, "train.bin")];
    if m.test_per_class > 0 {
        splits.push((Split::Test, "test.bin"));
    }
    for (split, name) in splits {
        let raw = synth_dataset(&m, split);
        let path = out.join(name);
        write_cifar_binary(&path, &raw, LabelLayout::Single)?;
        println!("wrote {} ({} images)", path.display(), raw.len());
    }
    println!(
        "load with data.source = \"binary\", class_count = {}, image_size = {}",
        m.class_count, m.image_size
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config } => train(config).map(|_| true),
        Command::Eval { checkpoint, data } => eval(checkpoint, data).map(|_| true),
        Command::ParamCount { netspec } => count(netspec).map(|_| true),
        Command::Gradcheck { mode } => gradcheck(*mode),
        Command::ExportAttention {
            checkpoint,
            data,
            outdir,
        } => export(checkpoint, data, outdir).map(|_| true),
        Command::SynthData { manifest } => synth(manifest).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
