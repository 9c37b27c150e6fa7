//! Synthetic three-modality emotion corpus.
//!
//! Each sample carries a latent emotion class. The class imprints a fixed
//! prototype vector into every visual and acoustic frame (scaled by the
//! modality's signal-to-noise ratio) and biases the word choice of the text.
//! Prototypes come from `world_seed`, so an unlabeled pre-training corpus and a
//! labeled downstream corpus generated with different `seed`s still share the
//! same class geometry.
//!
//! On disk a corpus is newline-delimited JSON, one record per sample, with
//! matrices stored as base-64 little-endian `f64`. A `<file>.manifest.json`
//! sidecar records counts, dimensions, seed and a hash of the generating spec.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::emotion::EmotionClass;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::{TokenSequence, Verbalizer, Vocab};

/// Per-class utterance counts of the two four-class benchmarks.
pub const IEMOCAP_COUNTS: [usize; 4] = [1636, 1103, 1084, 1708];
pub const MSP_IMPROV_COUNTS: [usize; 4] = [999, 460, 627, 1733];

/// FER+-style teacher label space; downstream classes occupy four of its slots.
pub const TEACHER_CLASSES: usize = 8;
const TEACHER_SLOT: [usize; 4] = [1, 4, 3, 0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModalitySnr {
    pub text: f64,
    pub visual: f64,
    pub acoustic: f64,
}

impl Default for ModalitySnr {
    fn default() -> Self {
        Self {
            text: 1.0,
            visual: 1.0,
            acoustic: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Samples per class, ordered Happy, Anger, Sadness, Neutral.
    pub counts: [usize; 4],
    /// Whether samples keep their label; unlabeled samples still have a latent class.
    pub labeled: bool,
    pub visual_dim: usize,
    pub acoustic_dim: usize,
    pub teacher_classes: usize,
    /// Inclusive range of visual frames per sample.
    pub visual_frames: (usize, usize),
    /// Inclusive range of raw acoustic frames, pooled by `pool_window` afterwards.
    pub acoustic_raw_frames: (usize, usize),
    pub pool_window: usize,
    /// Inclusive range of words per utterance (before any prompt phrase).
    pub text_words: (usize, usize),
    pub snr: ModalitySnr,
    /// Number of synthetic speakers; used as cross-validation groups.
    pub groups: usize,
    pub speaker_shift: f64,
    /// AR(1) coefficient of the frame noise.
    pub frame_smoothness: f64,
    pub teacher_softening: f64,
    /// Probability that the text contains an "i am <emotion word>" phrase.
    pub emotion_phrase_rate: f64,
    pub seed: u64,
    pub world_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            counts: [64; 4],
            labeled: true,
            visual_dim: 32,
            acoustic_dim: 32,
            teacher_classes: TEACHER_CLASSES,
            visual_frames: (4, 8),
            acoustic_raw_frames: (12, 24),
            pool_window: 3,
            text_words: (4, 8),
            snr: ModalitySnr::default(),
            groups: 4,
            speaker_shift: 0.3,
            frame_smoothness: 0.5,
            teacher_softening: 0.9,
            emotion_phrase_rate: 0.0,
            seed: 0,
            world_seed: 17,
        }
    }
}

impl CorpusSpec {
    /// Scales benchmark class proportions down to `total` samples (largest remainder).
    pub fn with_proportions(mut self, proportions: [usize; 4], total: usize) -> Self {
        let sum: usize = proportions.iter().sum();
        let exact: Vec<f64> = proportions
            .iter()
            .map(|&c| c as f64 * total as f64 / sum as f64)
            .collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let short = total - counts.iter().sum::<usize>();
        for &i in order.iter().take(short) {
            counts[i] += 1;
        }
        self.counts = [counts[0], counts[1], counts[2], counts[3]];
        self
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("corpus spec: {msg}")));
        if self.teacher_classes < 4 {
            return bad("teacher_classes must be at least 4");
        }
        if self.visual_dim == 0 || self.acoustic_dim == 0 {
            return bad("feature dimensions must be positive");
        }
        for (name, (lo, hi)) in [
            ("visual_frames", self.visual_frames),
            ("acoustic_raw_frames", self.acoustic_raw_frames),
            ("text_words", self.text_words),
        ] {
            if lo == 0 || lo > hi {
                return bad(&format!("{name} range must satisfy 1 <= min <= max"));
            }
        }
        let snr = &self.snr;
        if [snr.text, snr.visual, snr.acoustic]
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return bad("signal-to-noise ratios must be finite and >= 0");
        }
        if self.groups == 0 || self.pool_window == 0 {
            return bad("groups and pool_window must be positive");
        }
        if !(0.0..1.0).contains(&self.frame_smoothness) {
            return bad("frame_smoothness must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.teacher_softening) || !(0.0..=1.0).contains(&self.emotion_phrase_rate) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex_digest(json.as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: String,
    /// Speaker group used for leave-one-group-out evaluation.
    pub group: u32,
    pub text: TokenSequence,
    /// `[Tv × Dv]` face features.
    pub visual: Tensor,
    /// `[Tv × K]` teacher emotion distributions, one per visual frame.
    pub visual_teacher: Option<Tensor>,
    /// `[Ta × Da]` pooled acoustic features.
    pub acoustic: Tensor,
    pub label: Option<EmotionClass>,
}

impl MultimodalSample {
    pub fn check(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidInput(format!("sample {}: {msg}", self.id)));
        if self.visual.rank() != 2 || self.acoustic.rank() != 2 {
            return fail("frame matrices must be rank 2".into());
        }
        if !self.visual.is_finite() || !self.acoustic.is_finite() {
            return fail("non-finite frame features".into());
        }
        if self.text.ids.len() != self.text.word_ids.len() {
            return fail("token and word id lengths differ".into());
        }
        if let Some(t) = &self.visual_teacher {
            if t.rows() != self.visual.rows() {
                return fail("teacher rows do not match visual frames".into());
            }
            for r in 0..t.rows() {
                let s: f64 = t.row(r).iter().sum();
                if (s - 1.0).abs() > 1e-6 || t.row(r).iter().any(|&v| v < 0.0) {
                    return fail(format!("teacher row {r} is not a distribution"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<MultimodalSample>,
    pub spec: Option<CorpusSpec>,
}

/// Non-overlapping mean over windows of `window` rows; a final partial window
/// is averaged over its actual length.
pub fn pool_frames(frames: &Tensor, window: usize) -> Result<Tensor> {
    if frames.rank() != 2 || window == 0 {
        return Err(Error::InvalidInput(
            "pool_frames expects a matrix and window >= 1".into(),
        ));
    }
    let (t, d) = (frames.rows(), frames.last_dim());
    let out_rows = t.div_ceil(window);
    let mut out = vec![0.0; out_rows * d];
    for o in 0..out_rows {
        let rows = o * window..((o + 1) * window).min(t);
        let n = rows.len() as f64;
        for r in rows {
            for (acc, v) in out[o * d..(o + 1) * d].iter_mut().zip(frames.row(r)) {
                *acc += v;
            }
        }
        out[o * d..(o + 1) * d].iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![out_rows, d], out)
}

struct Lexicon {
    class_words: [&'static [&'static str]; 4],
    filler: &'static [&'static str],
}

const LEXICON: Lexicon = Lexicon {
    class_words: [
        &[
            "glad",
            "great",
            "love",
            "wonderful",
            "fun",
            "joy",
            "smile",
            "laugh",
            "excited",
            "awesome",
            "lucky",
            "party",
            "beautiful",
            "proud",
            "thanks",
            "hopeful",
        ],
        &[
            "hate",
            "furious",
            "mad",
            "annoying",
            "stupid",
            "rude",
            "fault",
            "yell",
            "ridiculous",
            "damn",
            "liar",
            "blame",
            "unfair",
            "unkind",
            "careless",
            "useless",
        ],
        &[
            "miss",
            "lonely",
            "cry",
            "sorry",
            "lost",
            "tired",
            "alone",
            "tears",
            "hurt",
            "broken",
            "funeral",
            "empty",
            "unhappy",
            "hopeless",
            "helpless",
            "sleepless",
        ],
        &[
            "okay", "fine", "normal", "meeting", "schedule", "weather", "lunch", "office", "report", "table", "number",
            "address", "form", "paper",
        ],
    ],
    filler: &[
        "you", "we", "they", "he", "she", "it", "is", "was", "the", "a", "to", "and", "but", "so", "of", "in", "on",
        "with", "my", "your", "this", "that", "what", "not", "just", "really", "very", "today", "now", "then", "here",
        "there", "about", "know", "think", "said", "go", "back", "home", "work", "time", "day", "night", "again",
        "maybe", "yes", "no", "oh", "well", "friend", "mom", "dad", "house", "car", "phone", "money", "job", "school",
        "dinner", "movie", "music", "news", "letter", "story",
    ],
};

pub(crate) fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Class prototypes shared by every corpus generated from the same world seed.
struct World {
    visual: Vec<Vec<f64>>,
    acoustic: Vec<Vec<f64>>,
}

impl World {
    fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.world_seed, 0x5EED));
        let visual = (0..4).map(|_| normal_vec(&mut rng, spec.visual_dim)).collect();
        let acoustic = (0..4).map(|_| normal_vec(&mut rng, spec.acoustic_dim)).collect();
        Self { visual, acoustic }
    }
}

fn frames(
    rng: &mut ChaCha8Rng,
    len: usize,
    prototype: &[f64],
    snr: f64,
    shift: &[f64],
    smoothness: f64,
) -> Result<Tensor> {
    let d = prototype.len();
    let innovation = (1.0 - smoothness * smoothness).sqrt();
    let mut noise = normal_vec(rng, d);
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        if t > 0 {
            for n in noise.iter_mut() {
                *n = smoothness * *n + innovation * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for j in 0..d {
            data.push(snr * prototype[j] + shift[j] + noise[j]);
        }
    }
    Tensor::new(vec![len, d], data)
}

fn utterance(rng: &mut ChaCha8Rng, spec: &CorpusSpec, class: usize, verbalizer_words: &[&str; 4]) -> String {
    let informative = spec.snr.text / (1.0 + spec.snr.text);
    let n = rng.gen_range(spec.text_words.0..=spec.text_words.1);
    let mut words: Vec<&str> = (0..n)
        .map(|_| {
            if rng.gen_bool(informative) {
                *LEXICON.class_words[class].choose(rng).expect("non-empty lexicon")
            } else {
                *LEXICON.filler.choose(rng).expect("non-empty filler")
            }
        })
        .collect();
    if rng.gen_bool(spec.emotion_phrase_rate) {
        let c = if rng.gen_bool(informative) {
            class
        } else {
            rng.gen_range(0..4)
        };
        let at = rng.gen_range(0..=words.len());
        words.splice(at..at, ["i", "am", verbalizer_words[c], "."]);
    }
    words.join(" ")
}

/// Deterministically generates the corpus described by `spec`.
pub fn generate(spec: &CorpusSpec, vocab: &Vocab) -> Result<Corpus> {
    spec.validate()?;
    // surface the same configuration errors the prompt path would hit
    Verbalizer::default_for(vocab)?;
    let world = World::new(spec);
    let verbalizer_words = Verbalizer::DEFAULT_WORDS;

    let mut classes: Vec<usize> = spec
        .counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(spec.seed, 1)));

    let shifts: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.groups)
        .map(|g| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x1000 + g as u64));
            let v = normal_vec(&mut rng, spec.visual_dim)
                .iter()
                .map(|x| x * spec.speaker_shift)
                .collect();
            let a = normal_vec(&mut rng, spec.acoustic_dim)
                .iter()
                .map(|x| x * spec.speaker_shift)
                .collect();
            (v, a)
        })
        .collect();

    let prefix = if spec.labeled { "s" } else { "u" };
    let k = spec.teacher_classes;
    let mut samples = Vec::with_capacity(classes.len());
    for (index, &class) in classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x10_0000 + index as u64));
        let group = index % spec.groups;
        let text = vocab.tokenize(&utterance(&mut rng, spec, class, &verbalizer_words));

        let tv = rng.gen_range(spec.visual_frames.0..=spec.visual_frames.1);
        let visual = frames(
            &mut rng,
            tv,
            &world.visual[class],
            spec.snr.visual,
            &shifts[group].0,
            spec.frame_smoothness,
        )?;
        let raw_ta = rng.gen_range(spec.acoustic_raw_frames.0..=spec.acoustic_raw_frames.1);
        let raw_acoustic = frames(
            &mut rng,
            raw_ta,
            &world.acoustic[class],
            spec.snr.acoustic,
            &shifts[group].1,
            spec.frame_smoothness,
        )?;
        let acoustic = pool_frames(&raw_acoustic, spec.pool_window)?;

        let teacher_row: Vec<f64> = if spec.snr.visual == 0.0 {
            vec![1.0 / k as f64; k]
        } else {
            let rest = (1.0 - spec.teacher_softening) / (k - 1) as f64;
            (0..k)
                .map(|j| {
                    if j == TEACHER_SLOT[class] {
                        spec.teacher_softening
                    } else {
                        rest
                    }
                })
                .collect()
        };
        let teacher = Tensor::new(vec![tv, k], teacher_row.repeat(tv))?;

        samples.push(MultimodalSample {
            id: format!("{prefix}{index:05}"),
            group: group as u32,
            text,
            visual,
            visual_teacher: Some(teacher),
            acoustic,
            label: spec.labeled.then(|| EmotionClass::ALL[class]),
        });
    }
    Ok(Corpus {
        samples,
        spec: Some(spec.clone()),
    })
}

/// Teacher-space slot that corresponds to a downstream class.
pub fn teacher_slot(class: EmotionClass) -> usize {
    TEACHER_SLOT[class.index()]
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    shape: Vec<usize>,
    data: String,
}

impl MatrixRecord {
    fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: t.shape().to_vec(),
            data: B64.encode(bytes),
        }
    }

    fn decode(&self) -> std::result::Result<Tensor, String> {
        let bytes = B64.decode(&self.data).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err("array byte length is not a multiple of 8".into());
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::new(self.shape.clone(), data).map_err(|e| e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    group: u32,
    label: Option<EmotionClass>,
    token_ids: Vec<u32>,
    word_ids: Vec<Option<u32>>,
    visual: MatrixRecord,
    visual_teacher: Option<MatrixRecord>,
    acoustic: MatrixRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: usize,
    pub class_counts: [usize; 4],
    pub unlabeled: usize,
    pub visual_dim: usize,
    pub acoustic_dim: usize,
    pub teacher_classes: Option<usize>,
    pub seed: Option<u64>,
    pub spec_hash: Option<String>,
    pub spec: Option<CorpusSpec>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn manifest(&self) -> Manifest {
        let mut class_counts = [0; 4];
        let mut unlabeled = 0;
        for s in &self.samples {
            match s.label {
                Some(c) => class_counts[c.index()] += 1,
                None => unlabeled += 1,
            }
        }
        let first = self.samples.first();
        Manifest {
            records: self.samples.len(),
            class_counts,
            unlabeled,
            visual_dim: first.map_or(0, |s| s.visual.last_dim()),
            acoustic_dim: first.map_or(0, |s| s.acoustic.last_dim()),
            teacher_classes: first.and_then(|s| s.visual_teacher.as_ref().map(Tensor::last_dim)),
            seed: self.spec.as_ref().map(|s| s.seed),
            spec_hash: self.spec.as_ref().map(CorpusSpec::hash),
            spec: self.spec.clone(),
        }
    }

    /// Writes the record file and its manifest sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(self.to_ndjson().as_bytes())?;
        out.flush()?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes");
        std::fs::write(manifest_path(path), manifest + "\n")?;
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for sample in &self.samples {
            let rec = SampleRecord {
                id: sample.id.clone(),
                group: sample.group,
                label: sample.label,
                token_ids: sample.text.ids.clone(),
                word_ids: sample.text.word_ids.clone(),
                visual: MatrixRecord::encode(&sample.visual),
                visual_teacher: sample.visual_teacher.as_ref().map(MatrixRecord::encode),
                acoustic: MatrixRecord::encode(&sample.acoustic),
            };
            s.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    /// Reads a record file; the manifest, when present, must agree on the record count.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(File::open(path)?);
        let mut samples = Vec::new();
        for (record, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |msg: String| Error::Parse { record, msg };
            let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
            let sample = MultimodalSample {
                text: TokenSequence::new(rec.token_ids, rec.word_ids).map_err(|e| parse(e.to_string()))?,
                visual: rec.visual.decode().map_err(parse)?,
                visual_teacher: rec.visual_teacher.map(|m| m.decode()).transpose().map_err(parse)?,
                acoustic: rec.acoustic.decode().map_err(parse)?,
                id: rec.id,
                group: rec.group,
                label: rec.label,
            };
            sample.check().map_err(|e| parse(e.to_string()))?;
            samples.push(sample);
        }
        let mpath = manifest_path(path);
        let spec = if mpath.exists() {
            let manifest: Manifest =
                serde_json::from_str(&std::fs::read_to_string(&mpath)?).map_err(|e| Error::Parse {
                    record: 0,
                    msg: format!("manifest: {e}"),
                })?;
            if manifest.records != samples.len() {
                return Err(Error::Parse {
                    record: samples.len(),
                    msg: format!(
                        "manifest lists {} records but file holds {}",
                        manifest.records,
                        samples.len()
                    ),
                });
            }
            manifest.spec
        } else {
            None
        };
        Ok(Self { samples, spec })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            counts: [25; 4],
            snr: ModalitySnr {
                text: 2.0,
                visual: 3.0,
                acoustic: 3.0,
            },
            emotion_phrase_rate: 0.5,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn pool_frames_examples() {
        let x = Tensor::from_rows(&[vec![3.0], vec![6.0], vec![9.0]]).unwrap();
        assert_eq!(pool_frames(&x, 3).unwrap().data(), &[6.0]);

        let one = Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap();
        assert_eq!(pool_frames(&one, 3).unwrap(), one);

        let x = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![6.0]]).unwrap();
        assert_eq!(pool_frames(&x, 3).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn pooling_preserves_mean_when_window_divides() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::new(vec![12, 2], data).unwrap();
        let p = pool_frames(&x, 3).unwrap();
        for col in 0..2 {
            let mi: f64 = (0..12).map(|r| x.get2(r, col)).sum::<f64>() / 12.0;
            let mo: f64 = (0..4).map(|r| p.get2(r, col)).sum::<f64>() / 4.0;
            assert!((mi - mo).abs() < 1e-12);
        }
    }

    #[test]
    fn benchmark_proportions_scale_down() {
        let spec = CorpusSpec::default().with_proportions(IEMOCAP_COUNTS, 5531);
        assert_eq!(spec.counts, IEMOCAP_COUNTS);
        let spec = CorpusSpec::default().with_proportions(IEMOCAP_COUNTS, 256);
        assert_eq!(spec.total(), 256);
        for (c, &full) in spec.counts.iter().zip(&IEMOCAP_COUNTS) {
            let exact = full as f64 * 256.0 / 5531.0;
            assert!((*c as f64 - exact).abs() < 1.0);
        }
    }

    #[test]
    fn generation_is_deterministic_and_valid() {
        let vocab = Vocab::builtin();
        let a = generate(&small_spec(), &vocab).unwrap();
        let b = generate(&small_spec(), &vocab).unwrap();
        assert_eq!(a.to_ndjson().as_bytes(), b.to_ndjson().as_bytes());
        assert_eq!(a.len(), 100);
        for s in &a.samples {
            s.check().unwrap();
            assert!(s.visual.rows() >= 1 && s.acoustic.rows() >= 1);
            let t = s.visual_teacher.as_ref().unwrap();
            let argmax = (0..TEACHER_CLASSES)
                .max_by(|&i, &j| t.row(0)[i].total_cmp(&t.row(0)[j]))
                .unwrap();
            assert_eq!(argmax, teacher_slot(s.label.unwrap()));
        }
        let other = generate(
            &CorpusSpec {
                seed: 1,
                ..small_spec()
            },
            &vocab,
        )
        .unwrap();
        assert_ne!(a.to_ndjson(), other.to_ndjson());
    }

    #[test]
    fn zero_visual_snr_gives_uniform_teacher() {
        let vocab = Vocab::builtin();
        let spec = CorpusSpec {
            counts: [2; 4],
            labeled: false,
            snr: ModalitySnr {
                text: 0.0,
                visual: 0.0,
                acoustic: 0.0,
            },
            ..CorpusSpec::default()
        };
        let c = generate(&spec, &vocab).unwrap();
        for s in &c.samples {
            assert!(s.label.is_none());
            let t = s.visual_teacher.as_ref().unwrap();
            assert!(t.data().iter().all(|&v| (v - 0.125).abs() < 1e-15));
        }
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let vocab = Vocab::builtin();
        let corpus = generate(&small_spec(), &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.ndjson");
        corpus.save(&path).unwrap();
        let back = Corpus::load(&path).unwrap();
        assert_eq!(back, corpus);
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
        assert_eq!(manifest.records, back.len());
        assert_eq!(manifest.class_counts, [25; 4]);

        // drop the tail of the file mid-record
        let text = std::fs::read_to_string(&path).unwrap();
        let cut = text.len() - 40;
        std::fs::write(&path, &text[..cut]).unwrap();
        match Corpus::load(&path) {
            Err(Error::Parse { record, .. }) => assert_eq!(record, 99),
            other => panic!("expected parse error, got {other:?}"),
        }

        // complete records but a stale manifest count
        let lines: Vec<&str> = text.lines().take(10).collect();
        std::fs::write(&path, lines.join("\n") + "\n").unwrap();
        assert!(matches!(Corpus::load(&path), Err(Error::Parse { record: 10, .. })));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let vocab = Vocab::builtin();
        for spec in [
            CorpusSpec {
                teacher_classes: 3,
                ..CorpusSpec::default()
            },
            CorpusSpec {
                visual_frames: (0, 3),
                ..CorpusSpec::default()
            },
            CorpusSpec {
                snr: ModalitySnr {
                    text: -1.0,
                    ..ModalitySnr::default()
                },
                ..CorpusSpec::default()
            },
        ] {
            assert!(matches!(generate(&spec, &vocab), Err(Error::Config(_))));
        }
    }
}
