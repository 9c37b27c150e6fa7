//! The desk-scale setup used by the examples and the acceptance suite: a
//! small model and a pair of high-SNR corpora that share class geometry.

use crate::config::RunConfig;
use crate::corpus::{CorpusSpec, ModalitySnr};
use crate::model::ModelConfig;

pub const FEATURE_DIM: usize = 16;

fn base_spec() -> CorpusSpec {
    CorpusSpec {
        visual_dim: FEATURE_DIM,
        acoustic_dim: FEATURE_DIM,
        text_words: (2, 5),
        snr: ModalitySnr {
            text: 10.0,
            visual: 3.0,
            acoustic: 3.0,
        },
        groups: 4,
        ..CorpusSpec::default()
    }
}

/// 512 unlabeled samples; every utterance carries an `i am <word> .` phrase.
pub fn pretrain_spec() -> CorpusSpec {
    CorpusSpec {
        counts: [128; 4],
        labeled: false,
        emotion_phrase_rate: 1.0,
        seed: 1,
        ..base_spec()
    }
}

/// 256 labeled samples over four speaker groups.
pub fn labeled_spec() -> CorpusSpec {
    CorpusSpec {
        counts: [64; 4],
        labeled: true,
        seed: 2,
        ..base_spec()
    }
}

pub fn model_config() -> ModelConfig {
    ModelConfig {
        hidden: 32,
        heads: 4,
        layers: 2,
        max_len: 64,
        visual_dim: FEATURE_DIM,
        acoustic_dim: FEATURE_DIM,
        ..ModelConfig::default()
    }
}

pub fn run_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: model_config(),
        ..RunConfig::default()
    };
    cfg.pretrain.lr = 3e-3;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate;
    use crate::tokenizer::Vocab;

    #[test]
    fn toy_setup_is_consistent() {
        let cfg = run_config();
        cfg.validate().unwrap();
        let vocab = Vocab::builtin();
        assert_eq!(cfg.model.vocab_size, vocab.len());
        for spec in [pretrain_spec(), labeled_spec()] {
            spec.validate().unwrap();
            assert_eq!(spec.visual_dim, cfg.model.visual_dim);
            assert_eq!(spec.teacher_classes, cfg.model.teacher_classes);
        }
        let small = CorpusSpec {
            counts: [8; 4],
            ..pretrain_spec()
        };
        for s in generate(&small, &vocab).unwrap().samples {
            let len = s.text.len() + 2 + s.visual.rows() + s.acoustic.rows();
            assert!(len <= cfg.model.max_len);
        }
    }
}
