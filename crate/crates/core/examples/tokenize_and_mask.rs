//! WordPiece tokenization, whole-word masking and span masking on frames.
//!
//! cargo run --example tokenize_and_mask

use mmemo::corpus::{generate, CorpusSpec};
use mmemo::masking::{plan_for_task, plan_span, plan_whole_word, MaskTargets, MaskingConfig, Task, TextAction};
use mmemo::tokenizer::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mmemo::Result<()> {
    let vocab = Vocab::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let seq = vocab.tokenize("i feel hopeless and unhappy , he was unfair and unkind");
    let pieces: Vec<&str> = seq.ids.iter().map(|&id| vocab.token(id).unwrap_or("?")).collect();
    println!("tokens: {}", pieces.join(" "));
    println!("words:  {:?}", seq.word_spans());

    // a high rate makes whole-word grouping easy to see
    let cfg = MaskingConfig {
        text_rate: 0.4,
        ..MaskingConfig::default()
    };
    let actions = plan_whole_word(&seq, &cfg, &vocab, &mut rng);
    let mut shown = pieces.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    for (pos, action) in &actions {
        shown[*pos] = match action {
            TextAction::Mask => "[MASK]".into(),
            TextAction::Random(id) => format!("<{}>", vocab.token(*id).unwrap_or("?")),
            TextAction::Keep => format!("={}=", pieces[*pos]),
        };
    }
    println!("masked: {}", shown.join(" "));

    let frames = plan_span(24, 3, 0.15, &mut rng);
    let line: String = (0..24).map(|t| if frames.contains(&t) { '#' } else { '.' }).collect();
    println!("span plan over 24 frames: {line}");

    let spec = CorpusSpec {
        counts: [1; 4],
        ..CorpusSpec::default()
    };
    let sample = &generate(&spec, &vocab)?.samples[0];
    for task in Task::ALL {
        let plan = plan_for_task(sample, task, &MaskingConfig::default(), &vocab, &mut rng)?;
        let targets = match &plan.targets {
            MaskTargets::Tokens(t) => format!("{} token ids", t.len()),
            MaskTargets::Frames(f) => format!("{:?} frame targets", f.shape()),
            MaskTargets::Teacher(t) => format!("{:?} teacher rows", t.shape()),
        };
        println!(
            "{:<14} masks {:?} positions {:?}: {targets}",
            task.name(),
            plan.modality(),
            plan.positions()
        );
    }
    Ok(())
}
