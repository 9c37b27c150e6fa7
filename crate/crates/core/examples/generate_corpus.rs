//! Generates the toy corpora and writes them as NDJSON with manifests.
//!
//! cargo run --example generate_corpus -- [out_dir]

use mmemo::corpus::{generate, manifest_path};
use mmemo::tokenizer::Vocab;
use mmemo::toy;

fn main() -> mmemo::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "data".into());
    let vocab = Vocab::builtin();
    for (name, spec) in [("pretrain", toy::pretrain_spec()), ("labeled", toy::labeled_spec())] {
        let corpus = generate(&spec, &vocab)?;
        let path = std::path::Path::new(&dir).join(format!("{name}.ndjson"));
        corpus.save(&path)?;
        let m = corpus.manifest();
        println!(
            "{name}: {} samples, class counts {:?}, {} unlabeled -> {} (+ {})",
            m.records,
            m.class_counts,
            m.unlabeled,
            path.display(),
            manifest_path(&path).display()
        );
        let s = &corpus.samples[0];
        println!(
            "  e.g. {}: \"{}\", {} visual frames, {} acoustic frames",
            s.id,
            vocab.detokenize(&s.text),
            s.visual.rows(),
            s.acoustic.rows()
        );
    }
    Ok(())
}
