//! Pre-training task ablation: drops span/whole-word masking, the visual
//! tasks or the acoustic task, and scores each checkpoint downstream.
//!
//! cargo run --release --example ablation -- [fraction]

use mmemo::corpus::generate;
use mmemo::tokenizer::Vocab;
use mmemo::toy;
use mmemo::trainer::{ablate, Log};

fn main() -> mmemo::Result<()> {
    let fraction: f64 = match std::env::args().nth(1) {
        Some(f) => f
            .parse()
            .map_err(|_| mmemo::Error::Config(format!("bad fraction {f:?}")))?,
        None => 0.1,
    };
    let vocab = Vocab::builtin();
    let unlabeled = generate(&toy::pretrain_spec(), &vocab)?.samples;
    let labeled = generate(&toy::labeled_spec(), &vocab)?.samples;
    let mut cfg = toy::run_config();
    cfg.downstream.fraction = fraction;
    let report = ablate(&unlabeled, &labeled, &cfg, &vocab, &mut Log::none())?;
    print!("{}", report.render());
    Ok(())
}
