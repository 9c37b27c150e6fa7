//! Compares Direct, Pretrain+Finetune and Pretrain+Prompt under speaker-group
//! cross-validation, with the full training split and with 10% of it.
//!
//! cargo run --release --example prompt_vs_finetune -- [checkpoint_path]
//!
//! Pre-trains from scratch when no checkpoint is given.

use mmemo::checkpoint::Checkpoint;
use mmemo::config::Setting;
use mmemo::corpus::generate;
use mmemo::tokenizer::Vocab;
use mmemo::toy;
use mmemo::trainer::{pretrain, run_seeds, Log};

fn main() -> mmemo::Result<()> {
    let vocab = Vocab::builtin();
    let cfg = toy::run_config();
    let checkpoint = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p)?,
        None => {
            let unlabeled = generate(&toy::pretrain_spec(), &vocab)?;
            pretrain(&unlabeled.samples, &cfg, &vocab, &mut Log::none())?.checkpoint
        }
    };
    checkpoint.ensure_config(&cfg.model)?;
    let labeled = generate(&toy::labeled_spec(), &vocab)?.samples;

    println!("{:<20} {:>9} {:>8} {:>8}", "setting", "fraction", "WA", "UAR");
    for fraction in [1.0, 0.1] {
        let mut c = cfg.clone();
        c.downstream.fraction = fraction;
        for setting in [Setting::Direct, Setting::PretrainFinetune, Setting::PretrainPrompt] {
            let r = run_seeds(setting, &labeled, Some(&checkpoint), None, &c, &vocab, &mut Log::none())?;
            println!(
                "{:<20} {fraction:>9} {:>8.4} {:>8.4}",
                setting.name(),
                r.mean_wa,
                r.mean_uar
            );
        }
    }
    Ok(())
}
