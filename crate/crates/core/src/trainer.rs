//! Training loops: round-robin multi-task pre-training, downstream finetune
//! and prompt training, the four experiment settings, seed averaging and the
//! pre-training task ablation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{encode, pack};
use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Setting};
use crate::corpus::{mix, MultimodalSample};
use crate::downstream::{
    compute_metrics, cross_validate, finetune_loss, finetune_predict, prompt_loss, prompt_predict, CvReport,
    MetricsReport,
};
use crate::error::{Error, Result};
use crate::heads::task_loss;
use crate::masking::{plan_for_task, MaskPlan, Task};
use crate::model::{ModelConfig, ParamStore, Session, Trainable};
use crate::optim::{AdamW, LinearSchedule};
use crate::tokenizer::{Verbalizer, Vocab};

/// Newline-delimited JSON log sink. `Log::none()` discards records.
pub struct Log {
    out: Option<BufWriter<File>>,
}

impl Log {
    pub fn none() -> Self {
        Self { out: None }
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self {
            out: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn record<T: Serialize>(&mut self, event: &str, value: &T) -> Result<()> {
        if let Some(out) = &mut self.out {
            let mut v = serde_json::to_value(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
            if let Some(obj) = v.as_object_mut() {
                obj.insert("event".into(), event.into());
            }
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task: Task,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
}

impl PretrainOutcome {
    pub fn losses(&self, task: Task) -> Vec<f64> {
        self.history.iter().filter(|r| r.task == task).map(|r| r.loss).collect()
    }

    /// Mean loss of `task` over the first and last `window` fraction of its steps.
    pub fn window_means(&self, task: Task, window: f64) -> Option<(f64, f64)> {
        let l = self.losses(task);
        let w = ((l.len() as f64 * window).ceil() as usize).max(1);
        if l.len() < w {
            return None;
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        Some((mean(&l[..w]), mean(&l[l.len() - w..])))
    }
}

/// One pre-training step's loss and gradients for `task` on `batch`.
pub fn task_step(
    model: &ModelConfig,
    params: &ParamStore,
    vocab: &Vocab,
    task: Task,
    batch: &[&MultimodalSample],
    plans: &[MaskPlan],
) -> Result<(f64, Vec<(String, crate::tensor::Tensor)>)> {
    let refs: Vec<Option<&MaskPlan>> = plans.iter().map(Some).collect();
    let packed = pack(batch, &refs, vocab, model.max_len)?;
    let mut sess = Session::new(model, params, Trainable::All);
    let enc = encode(&mut sess, &packed)?;
    let loss = task_loss(&mut sess, task, &enc, &packed, plans)?;
    let value = sess.graph.value(loss).item();
    sess.backward(loss)?;
    Ok((value, sess.gradients()))
}

/// Pre-trains from scratch: each step takes the next task round-robin, draws a
/// batch and its masking plans, and applies one AdamW update.
pub fn pretrain(
    samples: &[MultimodalSample],
    cfg: &RunConfig,
    vocab: &Vocab,
    log: &mut Log,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty pre-training corpus".into()));
    }
    let p = &cfg.pretrain;
    if p.tasks.contains(&Task::SpanMvfcKl) {
        if let Some(s) = samples.iter().find(|s| s.visual_teacher.is_none()) {
            return Err(Error::InvalidInput(format!(
                "span_mvfc_kl is scheduled but sample {} has no teacher rows",
                s.id
            )));
        }
    }
    let mut params = cfg.model.init(p.seed)?;
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let schedule = LinearSchedule::new(p.lr, p.steps, p.warmup_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(p.seed, 0x5052_4554));
    let batch_size = p.batch_size.min(samples.len());
    let mut history = Vec::with_capacity(p.steps);
    for step in 0..p.steps {
        let task = p.tasks[step % p.tasks.len()];
        let idx = rand::seq::index::sample(&mut rng, samples.len(), batch_size);
        let batch: Vec<&MultimodalSample> = idx.iter().map(|i| &samples[i]).collect();
        let plans = batch
            .iter()
            .map(|s| plan_for_task(s, task, &cfg.masking, vocab, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = task_step(&cfg.model, &params, vocab, task, &batch, &plans)?;
        let lr = schedule.lr(step);
        opt.step(&mut params, &grads, lr)?;
        let rec = StepRecord { step, task, loss, lr };
        log.record("pretrain_step", &rec)?;
        history.push(rec);
    }
    log.flush()?;
    Ok(PretrainOutcome {
        checkpoint: Checkpoint::new(cfg.model.clone(), params),
        history,
    })
}

/// Text-side parameters carried over by the bert+direct setting.
pub const TEXT_PREFIXES: [&str; 4] = ["embed.text.", "head.mlm.", "layers.", "final_ln."];

/// Parameters a downstream run starts from.
///
/// Prompt runs reuse the checkpoint unchanged; every other setting adds a
/// fresh `[H × 4]` classifier and bias.
pub fn initial_params(
    setting: Setting,
    model: &ModelConfig,
    checkpoint: Option<&Checkpoint>,
    text_source: Option<&Checkpoint>,
    seed: u64,
) -> Result<ParamStore> {
    let mut params = match setting {
        Setting::Direct => model.init(seed)?,
        Setting::BertDirect => {
            let mut p = model.init(seed)?;
            if let Some(src) = text_source {
                src.ensure_config(model)?;
                for (name, t) in src.params.iter() {
                    if TEXT_PREFIXES.iter().any(|pre| name.starts_with(pre)) {
                        p.insert(name, t.clone());
                    }
                }
            }
            p
        }
        Setting::PretrainFinetune | Setting::PretrainPrompt => {
            let ck = checkpoint.ok_or_else(|| {
                Error::MissingCheckpoint(format!("the {setting} setting needs a pre-trained checkpoint"))
            })?;
            ck.ensure_config(model)?;
            ck.params.clone()
        }
    };
    if !setting.uses_prompt() {
        params.extend(model.init_classifier(seed));
    }
    Ok(params)
}

fn verbalizer(cfg: &RunConfig, vocab: &Vocab) -> Result<Verbalizer> {
    let w = &cfg.downstream.verbalizer;
    Verbalizer::new(vocab, [w[0].as_str(), w[1].as_str(), w[2].as_str(), w[3].as_str()])
}

/// Trains `params` on labeled samples; returns the mean loss of each epoch.
pub fn train_downstream(
    params: &mut ParamStore,
    setting: Setting,
    train: &[&MultimodalSample],
    cfg: &RunConfig,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<f64>> {
    let d = &cfg.downstream;
    if setting.uses_prompt() && d.freeze_backbone {
        return Ok(Vec::new());
    }
    if train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let verb = verbalizer(cfg, vocab)?;
    let per_epoch = train.len().div_ceil(d.batch_size);
    let schedule = LinearSchedule::new(d.lr(), d.epochs * per_epoch, d.warmup_fraction);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x4441_5441));
    let mut order: Vec<&MultimodalSample> = train.to_vec();
    let mut epoch_losses = Vec::with_capacity(d.epochs);
    let mut step = 0;
    for _ in 0..d.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(d.batch_size) {
            let (loss, grads) = {
                let mut sess = Session::new(&cfg.model, params, Trainable::All);
                let loss = if setting.uses_prompt() {
                    prompt_loss(&mut sess, batch, vocab, &verb)?
                } else {
                    finetune_loss(&mut sess, batch, vocab, d.pooling)?
                };
                let value = sess.graph.value(loss).item();
                sess.backward(loss)?;
                (value, sess.gradients())
            };
            opt.step(params, &grads, schedule.lr(step))?;
            step += 1;
            total += loss * batch.len() as f64;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    Ok(epoch_losses)
}

const EVAL_BATCH: usize = 64;

pub fn evaluate(
    params: &ParamStore,
    setting: Setting,
    test: &[&MultimodalSample],
    cfg: &RunConfig,
    vocab: &Vocab,
) -> Result<MetricsReport> {
    let verb = verbalizer(cfg, vocab)?;
    let mut preds = Vec::with_capacity(test.len());
    for batch in test.chunks(EVAL_BATCH) {
        let mut sess = Session::new(&cfg.model, params, Trainable::Nothing);
        let p = if setting.uses_prompt() {
            prompt_predict(&mut sess, batch, vocab, &verb)?
        } else {
            finetune_predict(&mut sess, batch, vocab, cfg.downstream.pooling)?
        };
        preds.extend(p);
    }
    let labels = test
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::InvalidInput(format!("sample {} is unlabeled", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    compute_metrics(&preds, &labels)
}

#[derive(Clone, Debug, Serialize)]
struct FoldRecord<'a> {
    setting: Setting,
    seed: u64,
    fold: usize,
    wa: f64,
    uar: f64,
    confusion: &'a [[usize; 4]; 4],
    config_hash: &'a str,
}

/// Cross-validated metrics of one setting for one seed.
#[allow(clippy::too_many_arguments)]
pub fn run_setting(
    setting: Setting,
    labeled: &[MultimodalSample],
    checkpoint: Option<&Checkpoint>,
    text_source: Option<&Checkpoint>,
    cfg: &RunConfig,
    vocab: &Vocab,
    seed: u64,
    log: &mut Log,
) -> Result<CvReport> {
    cfg.validate()?;
    if setting.needs_checkpoint() && checkpoint.is_none() {
        return Err(Error::MissingCheckpoint(format!(
            "the {setting} setting needs a pre-trained checkpoint"
        )));
    }
    let d = &cfg.downstream;
    let hash = cfg.hash();
    cross_validate(
        labeled,
        d.folds,
        d.fraction,
        mix(d.cv_seed, seed),
        |fold, train, test| {
            let fold_seed = mix(seed, fold.index as u64 + 1);
            let mut params = initial_params(setting, &cfg.model, checkpoint, text_source, fold_seed)?;
            train_downstream(&mut params, setting, train, cfg, vocab, fold_seed)?;
            let report = evaluate(&params, setting, test, cfg, vocab)?;
            log.record(
                "fold",
                &FoldRecord {
                    setting,
                    seed,
                    fold: fold.index,
                    wa: report.wa,
                    uar: report.uar,
                    confusion: &report.confusion,
                    config_hash: &hash,
                },
            )?;
            Ok(report)
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub setting: Setting,
    pub fraction: f64,
    pub per_seed: Vec<CvReport>,
    pub mean_wa: f64,
    pub mean_uar: f64,
}

impl SettingReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{} (fraction {}): WA {:.4}  UAR {:.4}\n",
            self.setting, self.fraction, self.mean_wa, self.mean_uar
        );
        for (i, r) in self.per_seed.iter().enumerate() {
            s.push_str(&format!("  seed #{i}: WA {:.4}  UAR {:.4}\n", r.mean_wa, r.mean_uar));
            for (k, f) in r.folds.iter().enumerate() {
                s.push_str(&format!(
                    "    fold {k}: WA {:.4}  UAR {:.4}  n={}\n",
                    f.wa, f.uar, f.support
                ));
            }
        }
        s
    }
}

/// Runs a setting once per configured seed and averages.
pub fn run_seeds(
    setting: Setting,
    labeled: &[MultimodalSample],
    checkpoint: Option<&Checkpoint>,
    text_source: Option<&Checkpoint>,
    cfg: &RunConfig,
    vocab: &Vocab,
    log: &mut Log,
) -> Result<SettingReport> {
    let mut per_seed = Vec::new();
    for &seed in &cfg.downstream.seeds {
        per_seed.push(run_setting(
            setting,
            labeled,
            checkpoint,
            text_source,
            cfg,
            vocab,
            seed,
            log,
        )?);
    }
    let n = per_seed.len() as f64;
    let report = SettingReport {
        setting,
        fraction: cfg.downstream.fraction,
        mean_wa: per_seed.iter().map(|r| r.mean_wa).sum::<f64>() / n,
        mean_uar: per_seed.iter().map(|r| r.mean_uar).sum::<f64>() / n,
        per_seed,
    };
    log.record("setting", &report)?;
    log.flush()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSpanWholeWord,
    NoVisualTasks,
    NoAcousticTask,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoSpanWholeWord,
        Variant::NoVisualTasks,
        Variant::NoAcousticTask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpanWholeWord => "w/o span+whole-word",
            Variant::NoVisualTasks => "w/o visual tasks",
            Variant::NoAcousticTask => "w/o acoustic task",
        }
    }

    /// The run configuration for this variant.
    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoSpanWholeWord => c.masking = c.masking.without_span_and_whole_word(),
            Variant::NoVisualTasks => c
                .pretrain
                .tasks
                .retain(|t| !matches!(t, Task::SpanMvfr | Task::SpanMvfcKl)),
            Variant::NoAcousticTask => c.pretrain.tasks.retain(|t| *t != Task::SpanMafr),
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub tasks: Vec<Task>,
    pub report: SettingReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub setting: Setting,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn render(&self) -> String {
        let mut s = format!("pre-training task ablation ({})\n", self.setting);
        s.push_str(&format!("{:<22} {:>8} {:>8}\n", "variant", "WA", "UAR"));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<22} {:>8.4} {:>8.4}\n",
                r.variant.name(),
                r.report.mean_wa,
                r.report.mean_uar
            ));
        }
        s
    }
}

/// Pre-trains once per variant and evaluates each checkpoint with the
/// configured downstream setting.
pub fn ablate(
    unlabeled: &[MultimodalSample],
    labeled: &[MultimodalSample],
    cfg: &RunConfig,
    vocab: &Vocab,
    log: &mut Log,
) -> Result<AblationReport> {
    let setting = cfg.downstream.setting;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let vc = v.apply(cfg);
        let outcome = pretrain(unlabeled, &vc, vocab, &mut Log::none())?;
        let report = run_seeds(setting, labeled, Some(&outcome.checkpoint), None, &vc, vocab, log)?;
        rows.push(AblationRow {
            variant: v,
            tasks: vc.pretrain.tasks.clone(),
            report,
        });
    }
    let report = AblationReport { setting, rows };
    log.record("ablation", &report)?;
    log.flush()?;
    Ok(report)
}
