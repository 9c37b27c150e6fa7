//! Run configuration, read from TOML.
//!
//! Every section is optional; missing keys take the desk-scale defaults.
//! Full-scale reference values (batch 640, 40K pre-training steps) are far
//! beyond what the toy corpus needs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::hex_digest;
use crate::downstream::Pooling;
use crate::error::{Error, Result};
use crate::masking::{MaskingConfig, Task};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;
use crate::tokenizer::Verbalizer;

/// Environment variable that overrides `paths.out_dir`.
pub const OUT_DIR_ENV: &str = "MMEMO_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    #[serde(rename = "direct")]
    Direct,
    #[serde(rename = "bert+direct")]
    BertDirect,
    #[serde(rename = "pretrain+finetune")]
    PretrainFinetune,
    #[serde(rename = "pretrain+prompt")]
    PretrainPrompt,
}

impl Setting {
    pub const ALL: [Setting; 4] = [
        Setting::Direct,
        Setting::BertDirect,
        Setting::PretrainFinetune,
        Setting::PretrainPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Setting::Direct => "direct",
            Setting::BertDirect => "bert+direct",
            Setting::PretrainFinetune => "pretrain+finetune",
            Setting::PretrainPrompt => "pretrain+prompt",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, Setting::PretrainFinetune | Setting::PretrainPrompt)
    }

    pub fn uses_prompt(self) -> bool {
        self == Setting::PretrainPrompt
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['_', '-'], "+");
        Setting::ALL
            .into_iter()
            .find(|x| x.name() == norm || x.name().replace('+', "") == norm)
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Tasks visited round-robin, one per step.
    pub tasks: Vec<Task>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            warmup_fraction: 0.1,
            seed: 0,
            tasks: Task::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub setting: Setting,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate when training on all available data.
    pub lr_full: f64,
    /// Peak learning rate when `fraction < 1`.
    pub lr_fraction: f64,
    pub warmup_fraction: f64,
    pub fraction: f64,
    pub folds: usize,
    pub cv_seed: u64,
    /// One full cross-validation per seed; reports average over seeds.
    pub seeds: Vec<u64>,
    pub pooling: Pooling,
    /// Prompt setting only: evaluate the checkpoint without any updates.
    pub freeze_backbone: bool,
    pub verbalizer: [String; 4],
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            setting: Setting::PretrainPrompt,
            epochs: 15,
            batch_size: 32,
            lr_full: 5e-4,
            lr_fraction: 3e-4,
            warmup_fraction: 0.1,
            fraction: 1.0,
            folds: 4,
            cv_seed: 0,
            seeds: vec![0, 1, 2],
            pooling: Pooling::Cls,
            freeze_backbone: false,
            verbalizer: Verbalizer::DEFAULT_WORDS.map(String::from),
        }
    }
}

impl DownstreamConfig {
    pub fn lr(&self) -> f64 {
        if self.fraction < 1.0 {
            self.lr_fraction
        } else {
            self.lr_full
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub pretrain_data: Option<PathBuf>,
    pub labeled_data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Source of text-side weights for the bert+direct setting.
    pub text_checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub masking: MaskingConfig,
    pub optimizer: AdamWConfig,
    pub pretrain: PretrainConfig,
    pub downstream: DownstreamConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative paths are taken relative to the config file
        if let Some(base) = path.parent() {
            cfg.paths.rebase(base);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.masking.validate()?;
        let p = &self.pretrain;
        if p.batch_size == 0 || p.tasks.is_empty() {
            return Err(Error::Config(
                "pretrain needs a positive batch size and at least one task".into(),
            ));
        }
        if !(0.0..=1.0).contains(&p.warmup_fraction) || !(0.0..=1.0).contains(&self.downstream.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        let d = &self.downstream;
        if d.batch_size == 0 || d.seeds.is_empty() || d.folds < 2 {
            return Err(Error::Config(
                "downstream needs batch_size ≥ 1, folds ≥ 2 and at least one seed".into(),
            ));
        }
        if !(d.fraction > 0.0 && d.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", d.fraction)));
        }
        for lr in [p.lr, d.lr_full, d.lr_fraction] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config(format!("invalid learning rate {lr}")));
            }
        }
        Ok(())
    }

    /// Hash of everything except paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        hex_digest(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Output directory: the environment override, then the config, then `out`.
    pub fn out_dir(&self) -> PathBuf {
        std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .or_else(|| self.paths.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

impl PathsConfig {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.out_dir,
            &mut self.pretrain_data,
            &mut self.labeled_data,
            &mut self.checkpoint,
            &mut self.text_checkpoint,
            &mut self.vocab,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.pretrain.steps, 2000);
        assert_eq!(cfg.pretrain.batch_size, 16);
        assert_eq!(cfg.downstream.batch_size, 32);
        assert_eq!(cfg.downstream.epochs, 15);
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let text = r#"
            [model]
            hidden = 32
            layers = 2

            [pretrain]
            steps = 100
            tasks = ["wwmlm", "span_mafr"]

            [downstream]
            setting = "pretrain+finetune"
            fraction = 0.1
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.pretrain.tasks, vec![Task::Wwmlm, Task::SpanMafr]);
        assert_eq!(cfg.downstream.setting, Setting::PretrainFinetune);
        assert_eq!(cfg.downstream.lr(), cfg.downstream.lr_fraction);
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[model]\nhiden = 3").is_err());
        assert!(RunConfig::from_toml_str("[downstream]\nfraction = 0.0").is_err());
        assert!(RunConfig::from_toml_str("[downstream]\nsetting = \"magic\"").is_err());
        assert!(RunConfig::from_toml_str("[pretrain]\ntasks = []").is_err());
    }

    #[test]
    fn setting_names_parse() {
        for s in Setting::ALL {
            assert_eq!(s.name().parse::<Setting>().unwrap(), s);
        }
        assert_eq!("Pretrain_Prompt".parse::<Setting>().unwrap(), Setting::PretrainPrompt);
        assert_eq!("bert-direct".parse::<Setting>().unwrap(), Setting::BertDirect);
        assert!("prompt".parse::<Setting>().is_err());
    }

    #[test]
    fn direct_and_bert_direct_differ_only_in_setting() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.downstream.setting = Setting::BertDirect;
        let (ta, tb) = (a.to_toml(), b.to_toml());
        let diff: Vec<_> = ta.lines().zip(tb.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(diff.len(), 1);
        assert!(diff[0].1.contains("bert+direct"));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\ncheckpoint = \"ck/model.ckpt\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.checkpoint.unwrap(), dir.path().join("ck/model.ckpt"));
    }
}
