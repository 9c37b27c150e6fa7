//! Emotion recognition on top of the encoder: a classifier head over the
//! `[CLS]` (or mean-pooled) state, or the prompt path that reads the
//! masked-word prediction at an appended `i am [MASK] .` suffix.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{encode, PackItem, PackedInput};
use crate::corpus::MultimodalSample;
use crate::embed::Modality;
use crate::emotion::EmotionClass;
use crate::error::{Error, Result};
use crate::heads::mlm_logits;
use crate::model::{Session, CLASSIFIER_BIAS, CLASSIFIER_WEIGHT};
use crate::tensor::Tensor;
use crate::tokenizer::{Verbalizer, Vocab};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Cls,
    Mean,
}

fn labels_of(samples: &[&MultimodalSample]) -> Result<Vec<EmotionClass>> {
    samples
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::InvalidInput(format!("sample {} is unlabeled", s.id)))
        })
        .collect()
}

/// Class logits `[B × 4]` from the classifier head.
pub fn finetune_forward(
    sess: &mut Session<'_>,
    samples: &[&MultimodalSample],
    vocab: &Vocab,
    pooling: Pooling,
) -> Result<Var> {
    let items = samples
        .iter()
        .map(|s| PackItem::from_sample(s, None, vocab))
        .collect::<Result<Vec<_>>>()?;
    let packed = PackedInput::new(items, sess.config.max_len, 0)?;
    let enc = encode(sess, &packed)?;
    let pooled = match pooling {
        Pooling::Cls => {
            let rows: Vec<usize> = (0..packed.batch()).map(|b| packed.cls_row(b)).collect();
            sess.graph.gather_rows(enc.hidden, &rows)?
        }
        Pooling::Mean => {
            let (b, l) = (packed.batch(), packed.seq_len);
            let mut w = Tensor::zeros(&[b, b * l]);
            for (i, span) in packed.spans.iter().enumerate() {
                let row = w.row_mut(i);
                row[i * l..i * l + span.len].fill(1.0 / span.len as f64);
            }
            let w = sess.graph.constant(w);
            sess.graph.matmul(w, enc.hidden)?
        }
    };
    let w = sess.param(CLASSIFIER_WEIGHT)?;
    let b = sess.param(CLASSIFIER_BIAS)?;
    let logits = sess.graph.matmul(pooled, w)?;
    sess.graph.add_row(logits, b)
}

pub fn finetune_loss(
    sess: &mut Session<'_>,
    samples: &[&MultimodalSample],
    vocab: &Vocab,
    pooling: Pooling,
) -> Result<Var> {
    let labels: Vec<usize> = labels_of(samples)?.into_iter().map(EmotionClass::index).collect();
    let logits = finetune_forward(sess, samples, vocab, pooling)?;
    sess.graph.cross_entropy(logits, &labels)
}

/// Appends the prompt suffix to a sample's text; returns the item and the
/// text position of `[MASK]`.
pub fn prompt_item(sample: &MultimodalSample, vocab: &Vocab) -> Result<(PackItem, usize)> {
    let suffix = vocab.prompt_suffix()?;
    let mut text = sample.text.clone();
    let mask_pos = text.len() + suffix.mask_index;
    text.append(&suffix.tokens);
    let prompted = MultimodalSample { text, ..sample.clone() };
    Ok((PackItem::from_sample(&prompted, None, vocab)?, mask_pos))
}

/// Full-vocabulary logits `[B × V]` at each sample's prompt `[MASK]`.
pub fn prompt_forward(sess: &mut Session<'_>, samples: &[&MultimodalSample], vocab: &Vocab) -> Result<Var> {
    let mut items = Vec::with_capacity(samples.len());
    let mut mask_pos = Vec::with_capacity(samples.len());
    for s in samples {
        let (item, pos) = prompt_item(s, vocab)?;
        items.push(item);
        mask_pos.push(pos);
    }
    let packed = PackedInput::new(items, sess.config.max_len, 0)?;
    let enc = encode(sess, &packed)?;
    let rows: Vec<usize> = mask_pos
        .iter()
        .enumerate()
        .map(|(b, &p)| packed.row(b, Modality::Text, p))
        .collect();
    let rows = sess.graph.gather_rows(enc.hidden, &rows)?;
    mlm_logits(sess, rows)
}

/// Cross-entropy of the label's verbalizer word over the whole vocabulary.
pub fn prompt_loss(
    sess: &mut Session<'_>,
    samples: &[&MultimodalSample],
    vocab: &Vocab,
    verbalizer: &Verbalizer,
) -> Result<Var> {
    let targets: Vec<usize> = labels_of(samples)?
        .into_iter()
        .map(|l| verbalizer.id(l) as usize)
        .collect();
    let logits = prompt_forward(sess, samples, vocab)?;
    sess.graph.cross_entropy(logits, &targets)
}

/// Argmax over the verbalizer words only.
pub fn prompt_predict(
    sess: &mut Session<'_>,
    samples: &[&MultimodalSample],
    vocab: &Vocab,
    verbalizer: &Verbalizer,
) -> Result<Vec<EmotionClass>> {
    let logits = prompt_forward(sess, samples, vocab)?;
    let v = sess.graph.value(logits);
    Ok((0..v.rows())
        .map(|r| {
            let row = v.row(r);
            let best = argmax(&verbalizer.ids().map(|id| row[id as usize]));
            EmotionClass::from_index(best).expect("four verbalizer words")
        })
        .collect())
}

pub fn finetune_predict(
    sess: &mut Session<'_>,
    samples: &[&MultimodalSample],
    vocab: &Vocab,
    pooling: Pooling,
) -> Result<Vec<EmotionClass>> {
    let logits = finetune_forward(sess, samples, vocab, pooling)?;
    let v = sess.graph.value(logits);
    Ok((0..v.rows())
        .map(|r| EmotionClass::from_index(argmax(v.row(r))).expect("four classes"))
        .collect())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Overall accuracy.
    pub wa: f64,
    /// Mean per-class recall over classes present in the labels.
    pub uar: f64,
    /// `confusion[true][predicted]`.
    pub confusion: [[usize; EmotionClass::COUNT]; EmotionClass::COUNT],
    pub support: usize,
}

pub fn compute_metrics(predictions: &[EmotionClass], labels: &[EmotionClass]) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("metrics over an empty set".into()));
    }
    let mut confusion = [[0usize; EmotionClass::COUNT]; EmotionClass::COUNT];
    for (p, l) in predictions.iter().zip(labels) {
        confusion[l.index()][p.index()] += 1;
    }
    let correct: usize = (0..EmotionClass::COUNT).map(|c| confusion[c][c]).sum();
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(MetricsReport {
        wa: correct as f64 / labels.len() as f64,
        uar: recalls.iter().sum::<f64>() / recalls.len() as f64,
        confusion,
        support: labels.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<MetricsReport>,
    pub mean_wa: f64,
    pub mean_uar: f64,
}

impl CvReport {
    pub fn from_folds(folds: Vec<MetricsReport>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_wa = folds.iter().map(|f| f.wa).sum::<f64>() / n;
        let mean_uar = folds.iter().map(|f| f.uar).sum::<f64>() / n;
        Self {
            folds,
            mean_wa,
            mean_uar,
        }
    }
}

/// One train/test split of a cross-validation run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub test_groups: Vec<u32>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Group-disjoint folds. Groups are shuffled with `seed` and dealt round-robin;
/// the training side keeps `round(fraction · n)` samples (at least one).
pub fn make_folds(samples: &[MultimodalSample], folds: usize, fraction: f64, seed: u64) -> Result<Vec<Fold>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("training fraction {fraction} outside (0, 1]")));
    }
    let mut groups: Vec<u32> = samples.iter().map(|s| s.group).collect();
    groups.sort_unstable();
    groups.dedup();
    if folds < 2 || groups.len() < folds {
        return Err(Error::Config(format!(
            "{folds} folds need at least that many speaker groups, found {}",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);
    (0..folds)
        .map(|k| {
            let test_groups: Vec<u32> = groups.iter().skip(k).step_by(folds).copied().collect();
            let (test, mut train): (Vec<usize>, Vec<usize>) =
                (0..samples.len()).partition(|&i| test_groups.contains(&samples[i].group));
            let keep = ((fraction * train.len() as f64).round() as usize).max(1);
            train.shuffle(&mut rng);
            train.truncate(keep);
            train.sort_unstable();
            Ok(Fold {
                index: k,
                test_groups,
                train,
                test,
            })
        })
        .collect()
}

/// Runs `train_eval` on every fold and averages the metrics.
pub fn cross_validate<F>(
    samples: &[MultimodalSample],
    folds: usize,
    fraction: f64,
    seed: u64,
    mut train_eval: F,
) -> Result<CvReport>
where
    F: FnMut(&Fold, &[&MultimodalSample], &[&MultimodalSample]) -> Result<MetricsReport>,
{
    let mut reports = Vec::new();
    for fold in make_folds(samples, folds, fraction, seed)? {
        let train: Vec<&MultimodalSample> = fold.train.iter().map(|&i| &samples[i]).collect();
        let test: Vec<&MultimodalSample> = fold.test.iter().map(|&i| &samples[i]).collect();
        reports.push(train_eval(&fold, &train, &test)?);
    }
    Ok(CvReport::from_folds(reports))
}
