//! Masking planners for the four pre-training tasks.
//!
//! Every plan targets exactly one modality; the other two are left intact.
//! Text masking selects whole words and gives all of a word's sub-tokens the
//! same action class. Frame masking zeroes fixed-length spans of consecutive
//! frames.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::MultimodalSample;
use crate::embed::Modality;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenId, TokenSequence, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Wwmlm,
    SpanMvfr,
    SpanMvfcKl,
    SpanMafr,
}

impl Task {
    /// Round-robin order used by the pre-training schedule.
    pub const ALL: [Task; 4] = [Task::Wwmlm, Task::SpanMvfr, Task::SpanMvfcKl, Task::SpanMafr];

    pub fn modality(self) -> Modality {
        match self {
            Task::Wwmlm => Modality::Text,
            Task::SpanMvfr | Task::SpanMvfcKl => Modality::Visual,
            Task::SpanMafr => Modality::Acoustic,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Wwmlm => "wwmlm",
            Task::SpanMvfr => "span_mvfr",
            Task::SpanMvfcKl => "span_mvfc_kl",
            Task::SpanMafr => "span_mafr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextAction {
    Mask,
    Random(TokenId),
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MaskTargets {
    /// Original token ids at the planned text positions.
    Tokens(Vec<TokenId>),
    /// Original (pre-mask) frame rows at the masked positions.
    Frames(Tensor),
    /// Teacher distribution rows at the masked visual positions.
    Teacher(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub task: Task,
    /// Positions within the sample's text (not counting `[CLS]`), ascending.
    pub text_actions: Vec<(usize, TextAction)>,
    /// Masked frame indices in the task's modality, ascending.
    pub frame_positions: Vec<usize>,
    pub targets: MaskTargets,
}

impl MaskPlan {
    pub fn modality(&self) -> Modality {
        self.task.modality()
    }

    /// Number of prediction targets.
    pub fn len(&self) -> usize {
        match self.task {
            Task::Wwmlm => self.text_actions.len(),
            _ => self.frame_positions.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions (within the targeted segment) carrying a prediction target.
    pub fn positions(&self) -> Vec<usize> {
        match self.task {
            Task::Wwmlm => self.text_actions.iter().map(|&(p, _)| p).collect(),
            _ => self.frame_positions.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    /// Per-word selection probability for text.
    pub text_rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    /// Target fraction of masked frames.
    pub frame_rate: f64,
    pub span_len: usize,
    /// Select whole words; when false, sub-tokens are selected independently.
    pub whole_word: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            frame_rate: 0.15,
            span_len: 3,
            whole_word: true,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.text_rate, self.mask_prob, self.random_prob, self.frame_rate];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.mask_prob + self.random_prob > 1.0 + 1e-12 {
            return Err(Error::Config("masking probabilities must lie in [0, 1]".into()));
        }
        if self.span_len == 0 {
            return Err(Error::Config("span_len must be at least 1".into()));
        }
        Ok(())
    }

    /// The "no span, no whole-word" ablation: single-frame spans and
    /// independently selected sub-tokens.
    pub fn without_span_and_whole_word(&self) -> Self {
        Self {
            span_len: 1,
            whole_word: false,
            ..self.clone()
        }
    }
}

fn draw_action<R: Rng + ?Sized>(cfg: &MaskingConfig, rng: &mut R) -> TextAction {
    let u: f64 = rng.gen();
    if u < cfg.mask_prob {
        TextAction::Mask
    } else if u < cfg.mask_prob + cfg.random_prob {
        TextAction::Random(0)
    } else {
        TextAction::Keep
    }
}

fn resolve<R: Rng + ?Sized>(action: TextAction, replacements: &[TokenId], rng: &mut R) -> TextAction {
    match action {
        TextAction::Random(_) => TextAction::Random(*replacements.choose(rng).expect("vocabulary has ordinary tokens")),
        a => a,
    }
}

/// Selection units for text masking: whole words, or single sub-tokens.
fn text_units(seq: &TokenSequence, whole_word: bool) -> Vec<std::ops::Range<usize>> {
    let spans = seq.word_spans();
    if whole_word {
        spans
    } else {
        spans.into_iter().flat_map(|r| r.map(|p| p..p + 1)).collect()
    }
}

fn actions_for<R: Rng + ?Sized>(
    units: &[std::ops::Range<usize>],
    cfg: &MaskingConfig,
    replacements: &[TokenId],
    rng: &mut R,
) -> Vec<(usize, TextAction)> {
    let mut out = Vec::new();
    for unit in units {
        let class = draw_action(cfg, rng);
        for p in unit.clone() {
            out.push((p, resolve(class, replacements, rng)));
        }
    }
    out
}

/// Whole-word (or per-sub-token) selection at `cfg.text_rate` with the
/// mask/random/keep split drawn once per selected unit.
pub fn plan_whole_word<R: Rng + ?Sized>(
    seq: &TokenSequence,
    cfg: &MaskingConfig,
    vocab: &Vocab,
    rng: &mut R,
) -> Vec<(usize, TextAction)> {
    let units = text_units(seq, cfg.whole_word);
    let selected: Vec<_> = units.into_iter().filter(|_| rng.gen_bool(cfg.text_rate)).collect();
    actions_for(&selected, cfg, &vocab.ordinary_ids(), rng)
}

/// Per-position start probability giving an expected masked fraction of
/// `rate` when each span of `span_len` is followed by one unmasked frame.
pub fn span_start_probability(rate: f64, span_len: usize) -> f64 {
    if rate <= 0.0 {
        return 0.0;
    }
    let s = span_len as f64;
    let denom = s / rate - s;
    if denom <= 1.0 {
        1.0
    } else {
        1.0 / denom
    }
}

/// Span masking over `t` frames. Spans never overlap or touch, so every
/// masked run has length `span_len` unless cut by the end of the sequence.
pub fn plan_span<R: Rng + ?Sized>(t: usize, span_len: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    let q = span_start_probability(rate, span_len);
    let mut out = Vec::new();
    let mut p = 0;
    while p < t {
        if q > 0.0 && rng.gen_bool(q) {
            out.extend(p..(p + span_len).min(t));
            p += span_len + 1;
        } else {
            p += 1;
        }
    }
    out
}

/// Builds the plan for one sample under one task. Only the task's modality is
/// touched; if the random draw selects nothing, one unit is forced.
pub fn plan_for_task<R: Rng + ?Sized>(
    sample: &MultimodalSample,
    task: Task,
    cfg: &MaskingConfig,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<MaskPlan> {
    match task {
        Task::Wwmlm => {
            let mut actions = plan_whole_word(&sample.text, cfg, vocab, rng);
            if actions.is_empty() {
                let units = text_units(&sample.text, cfg.whole_word);
                let unit = units
                    .choose(rng)
                    .ok_or_else(|| Error::InvalidInput(format!("sample {} has no maskable text", sample.id)))?;
                actions = actions_for(std::slice::from_ref(unit), cfg, &vocab.ordinary_ids(), rng);
            }
            let targets = actions.iter().map(|&(p, _)| sample.text.ids[p]).collect();
            Ok(MaskPlan {
                task,
                text_actions: actions,
                frame_positions: Vec::new(),
                targets: MaskTargets::Tokens(targets),
            })
        }
        Task::SpanMvfr | Task::SpanMvfcKl | Task::SpanMafr => {
            let frames = if task == Task::SpanMafr {
                &sample.acoustic
            } else {
                &sample.visual
            };
            let t = frames.rows();
            let mut positions = plan_span(t, cfg.span_len, cfg.frame_rate, rng);
            if positions.is_empty() {
                let start = rng.gen_range(0..=t.saturating_sub(cfg.span_len));
                positions.extend(start..(start + cfg.span_len).min(t));
            }
            let targets = match task {
                Task::SpanMvfcKl => {
                    let teacher = sample.visual_teacher.as_ref().ok_or_else(|| {
                        Error::InvalidInput(format!("sample {} has no teacher distributions", sample.id))
                    })?;
                    MaskTargets::Teacher(teacher.select_rows(&positions)?)
                }
                _ => MaskTargets::Frames(frames.select_rows(&positions)?),
            };
            Ok(MaskPlan {
                task,
                text_actions: Vec::new(),
                frame_positions: positions,
                targets,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, CorpusSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn runs(positions: &[usize]) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &p in positions {
            match out.last_mut() {
                Some((start, len)) if *start + *len == p => *len += 1,
                _ => out.push((p, 1)),
            }
        }
        out
    }

    #[test]
    fn whole_word_masks_all_sub_tokens_together() {
        let vocab = Vocab::builtin();
        let seq = vocab.tokenize("unhappy");
        let cfg = MaskingConfig {
            text_rate: 1.0,
            ..MaskingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let actions = plan_whole_word(&seq, &cfg, &vocab, &mut rng);
            assert_eq!(actions.len(), 2);
            let kind = |a: TextAction| std::mem::discriminant(&a);
            assert_eq!(kind(actions[0].1), kind(actions[1].1));
        }
    }

    #[test]
    fn rate_boundaries() {
        let vocab = Vocab::builtin();
        let seq = vocab.tokenize("oh i feel so hopeless today, really unhappy!");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let zero = MaskingConfig {
            text_rate: 0.0,
            ..MaskingConfig::default()
        };
        assert!(plan_whole_word(&seq, &zero, &vocab, &mut rng).is_empty());

        let all = MaskingConfig {
            text_rate: 1.0,
            mask_prob: 1.0,
            random_prob: 0.0,
            ..MaskingConfig::default()
        };
        let actions = plan_whole_word(&seq, &all, &vocab, &mut rng);
        assert_eq!(actions.len(), seq.len());
        assert!(actions.iter().all(|&(_, a)| a == TextAction::Mask));
    }

    #[test]
    fn span_examples() {
        // a start at 4 with span 3 covers 4..7
        struct Fixed(Vec<bool>);
        impl rand::RngCore for Fixed {
            fn next_u32(&mut self) -> u32 {
                self.next_u64() as u32
            }
            fn next_u64(&mut self) -> u64 {
                if self.0.remove(0) {
                    0
                } else {
                    u64::MAX
                }
            }
            fn fill_bytes(&mut self, dest: &mut [u8]) {
                dest.fill(0)
            }
            fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
                dest.fill(0);
                Ok(())
            }
        }
        let draws = |starts: &[usize], t: usize| {
            let mut v = vec![false; t];
            for &s in starts {
                v[s] = true;
            }
            Fixed(v)
        };
        // positions 0..4 draw false, 4 draws true, then the walk jumps to 8
        let mut rng = draws(&[4], 12);
        let mut seq: Vec<bool> = rng.0[..5].to_vec();
        seq.extend([false, false]);
        rng.0 = seq;
        assert_eq!(plan_span(10, 3, 0.15, &mut rng), vec![4, 5, 6]);

        let mut rng = draws(&[9], 10);
        assert_eq!(plan_span(10, 3, 0.15, &mut rng), vec![9]);
    }

    #[test]
    fn span_runs_have_exact_length_and_target_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = 60;
        let (mut masked, mut total) = (0usize, 0usize);
        for _ in 0..20_000 {
            let pos = plan_span(t, 3, 0.15, &mut rng);
            for (start, len) in runs(&pos) {
                assert!(len == 3 || start + len == t, "run {start}+{len}");
            }
            masked += pos.len();
            total += t;
        }
        let frac = masked as f64 / total as f64;
        assert!((0.13..=0.17).contains(&frac), "{frac}");
    }

    fn corpus() -> Vec<MultimodalSample> {
        let spec = CorpusSpec {
            counts: [5; 4],
            ..CorpusSpec::default()
        };
        generate(&spec, &Vocab::builtin()).unwrap().samples
    }

    #[test]
    fn plans_touch_only_their_modality() {
        let vocab = Vocab::builtin();
        let cfg = MaskingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for s in corpus() {
            for task in Task::ALL {
                let plan = plan_for_task(&s, task, &cfg, &vocab, &mut rng).unwrap();
                assert!(!plan.is_empty());
                match task {
                    Task::Wwmlm => assert!(plan.frame_positions.is_empty()),
                    _ => assert!(plan.text_actions.is_empty()),
                }
                match (&plan.targets, task) {
                    (MaskTargets::Tokens(t), Task::Wwmlm) => assert_eq!(t.len(), plan.len()),
                    (MaskTargets::Teacher(t), Task::SpanMvfcKl) => {
                        assert_eq!(t.rows(), plan.len());
                        assert_eq!(
                            t.row(0),
                            s.visual_teacher.as_ref().unwrap().row(plan.frame_positions[0])
                        );
                    }
                    (MaskTargets::Frames(f), Task::SpanMvfr) => {
                        assert_eq!(f.row(0), s.visual.row(plan.frame_positions[0]))
                    }
                    (MaskTargets::Frames(f), Task::SpanMafr) => {
                        assert_eq!(f.row(0), s.acoustic.row(plan.frame_positions[0]))
                    }
                    other => panic!("unexpected targets {other:?}"),
                }
            }
        }
    }

    #[test]
    fn forced_minimum_and_determinism() {
        let vocab = Vocab::builtin();
        let cfg = MaskingConfig {
            text_rate: 0.001,
            frame_rate: 0.001,
            ..MaskingConfig::default()
        };
        let samples = corpus();
        for task in Task::ALL {
            let a = plan_for_task(&samples[0], task, &cfg, &vocab, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = plan_for_task(&samples[0], task, &cfg, &vocab, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert!(!a.is_empty());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn missing_teacher_is_an_error() {
        let vocab = Vocab::builtin();
        let mut s = corpus().remove(0);
        s.visual_teacher = None;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(plan_for_task(&s, Task::SpanMvfcKl, &MaskingConfig::default(), &vocab, &mut rng).is_err());
        assert!(plan_for_task(&s, Task::SpanMvfr, &MaskingConfig::default(), &vocab, &mut rng).is_ok());
    }

    #[test]
    fn start_probability_hits_rate_in_the_long_run() {
        for (rate, s) in [(0.15, 3usize), (0.15, 1), (0.3, 5)] {
            let q = span_start_probability(rate, s);
            let frac = s as f64 / ((1.0 - q) / q + s as f64 + 1.0);
            assert!((frac - rate).abs() < 1e-12);
        }
        assert_eq!(span_start_probability(0.0, 3), 0.0);
        assert_eq!(span_start_probability(0.9, 3), 1.0);
    }
}
