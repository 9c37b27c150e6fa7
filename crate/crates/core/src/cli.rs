//! Command-line surface: `gen-data`, `pretrain`, `finetune`, `prompt`,
//! `eval` and `ablate`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Setting};
use crate::corpus::{generate, Corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::tokenizer::Vocab;
use crate::trainer::{ablate, initial_params, pretrain, run_seeds, train_downstream, Log};

#[derive(Parser, Debug)]
#[command(name = "mmemo", version, about = "Multimodal emotion pre-training on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus and its manifest.
    GenData {
        /// Corpus spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the spec's sample seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pre-train on an unlabeled corpus and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Unlabeled corpus (overrides `paths.pretrain_data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path (defaults to `<out_dir>/checkpoint.ckpt`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate the pretrain+finetune setting.
    Finetune(Downstream),
    /// Cross-validate the pretrain+prompt setting.
    Prompt(Downstream),
    /// Cross-validate any setting.
    Eval {
        #[command(flatten)]
        downstream: Downstream,
        /// direct, bert+direct, pretrain+finetune or pretrain+prompt.
        #[arg(long)]
        setting: Option<String>,
    },
    /// Pre-train the full and ablated task sets and compare them downstream.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pretrain_data: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config; the environment wins over both).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Downstream {
    #[command(flatten)]
    common: Common,
    /// Labeled corpus (overrides `paths.labeled_data`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Fraction of each training split to use.
    #[arg(long)]
    fraction: Option<f64>,
    /// Also train on the whole labeled corpus and save the adapted model here.
    #[arg(long)]
    save: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Reports go to `out`, diagnostics to stderr.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.out_dir {
        cfg.paths.out_dir = Some(d.clone());
    }
    Ok(cfg)
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    match &cfg.paths.vocab {
        Some(p) => Vocab::load(p),
        None => Ok(Vocab::builtin()),
    }
}

fn required(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| Error::Config(format!("no {what} given (flag or config)")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData { spec, out: path, seed } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let mut spec: CorpusSpec = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let corpus = generate(&spec, &Vocab::builtin())?;
            corpus.save(&path)?;
            writeln!(out, "wrote {} samples to {}", corpus.len(), path.display())?;
        }
        Command::Pretrain {
            common,
            data,
            out: ckpt,
        } => {
            let cfg = load_config(&common)?;
            let vocab = load_vocab(&cfg)?;
            let data = required(data.or(cfg.paths.pretrain_data.clone()), "pre-training corpus")?;
            let corpus = Corpus::load(&data)?;
            let dir = cfg.out_dir();
            let mut log = Log::to_file(dir.join("pretrain_log.ndjson"))?;
            let outcome = pretrain(&corpus.samples, &cfg, &vocab, &mut log)?;
            let path = ckpt
                .or(cfg.paths.checkpoint.clone())
                .unwrap_or_else(|| dir.join("checkpoint.ckpt"));
            outcome.checkpoint.save(&path)?;
            for task in &cfg.pretrain.tasks {
                if let Some((first, last)) = outcome.window_means(*task, 0.1) {
                    writeln!(out, "{:<14} loss {first:.4} -> {last:.4}", task.name())?;
                }
            }
            writeln!(out, "checkpoint {}", path.display())?;
        }
        Command::Finetune(d) => downstream(d, Some(Setting::PretrainFinetune), out)?,
        Command::Prompt(d) => downstream(d, Some(Setting::PretrainPrompt), out)?,
        Command::Eval { downstream: d, setting } => {
            let setting = setting.map(|s| s.parse()).transpose()?;
            downstream(d, setting, out)?
        }
        Command::Ablate {
            common,
            pretrain_data,
            data,
            fraction,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(f) = fraction {
                cfg.downstream.fraction = f;
            }
            cfg.validate()?;
            let vocab = load_vocab(&cfg)?;
            let unlabeled = Corpus::load(required(
                pretrain_data.or(cfg.paths.pretrain_data.clone()),
                "pre-training corpus",
            )?)?;
            let labeled = Corpus::load(required(data.or(cfg.paths.labeled_data.clone()), "labeled corpus")?)?;
            let dir = cfg.out_dir();
            let mut log = Log::to_file(dir.join("ablate_log.ndjson"))?;
            let report = ablate(&unlabeled.samples, &labeled.samples, &cfg, &vocab, &mut log)?;
            write_json(&dir.join("ablation.json"), &report)?;
            write!(out, "{}", report.render())?;
        }
    }
    Ok(())
}

fn downstream(d: Downstream, setting: Option<Setting>, out: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(&d.common)?;
    if let Some(s) = setting {
        cfg.downstream.setting = s;
    }
    if let Some(f) = d.fraction {
        cfg.downstream.fraction = f;
    }
    cfg.validate()?;
    let setting = cfg.downstream.setting;
    let vocab = load_vocab(&cfg)?;
    let labeled = Corpus::load(required(d.data.or(cfg.paths.labeled_data.clone()), "labeled corpus")?)?;
    let checkpoint = match d.checkpoint.or(cfg.paths.checkpoint.clone()) {
        Some(p) => Some(Checkpoint::load(p)?),
        None if setting.needs_checkpoint() => {
            return Err(Error::MissingCheckpoint(format!(
                "the {setting} setting needs --checkpoint"
            )))
        }
        None => None,
    };
    let text_source = match (&cfg.paths.text_checkpoint, setting) {
        (Some(p), Setting::BertDirect) => Some(Checkpoint::load(p)?),
        _ => None,
    };
    let dir = cfg.out_dir();
    let tag = setting.name().replace('+', "_");
    let mut log = Log::to_file(dir.join(format!("{tag}_log.ndjson")))?;
    let report = run_seeds(
        setting,
        &labeled.samples,
        checkpoint.as_ref(),
        text_source.as_ref(),
        &cfg,
        &vocab,
        &mut log,
    )?;
    write_json(&dir.join(format!("metrics_{tag}.json")), &report)?;
    write!(out, "{}", report.render())?;

    if let Some(path) = d.save {
        let seed = cfg.downstream.seeds[0];
        let mut params = initial_params(setting, &cfg.model, checkpoint.as_ref(), text_source.as_ref(), seed)?;
        let all: Vec<_> = labeled.samples.iter().collect();
        train_downstream(&mut params, setting, &all, &cfg, &vocab, seed)?;
        Checkpoint::new(cfg.model.clone(), params).save(&path)?;
        writeln!(out, "adapted model {}", path.display())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(args.iter().copied(), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn usage_errors() {
        assert_eq!(run_capture(&["mmemo", "frobnicate"]).0, 2);
        assert_eq!(run_capture(&["mmemo", "pretrain", "--bogus"]).0, 2);
        assert_eq!(
            run_capture(&["mmemo", "eval", "--setting", "magic", "--data", "x"]).0,
            2
        );
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.toml");
        std::fs::write(&spec, "counts = [2, 2, 2, 2]\ngroups = 2\n").unwrap();
        let data = dir.path().join("lab.ndjson");
        let (code, _) = run_capture(&[
            "mmemo",
            "gen-data",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let (code, _) = run_capture(&[
            "mmemo",
            "prompt",
            "--data",
            data.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }
}
