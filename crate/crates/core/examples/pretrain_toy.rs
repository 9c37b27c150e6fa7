//! Pre-trains the toy model on all four masking tasks and saves a checkpoint.
//!
//! cargo run --release --example pretrain_toy -- [checkpoint_path]

use mmemo::checkpoint::Checkpoint;
use mmemo::corpus::generate;
use mmemo::masking::Task;
use mmemo::tokenizer::Vocab;
use mmemo::toy;
use mmemo::trainer::{pretrain, Log};

fn main() -> mmemo::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "out/checkpoint.ckpt".into());
    let vocab = Vocab::builtin();
    let corpus = generate(&toy::pretrain_spec(), &vocab)?;
    let cfg = toy::run_config();

    let start = std::time::Instant::now();
    let outcome = pretrain(&corpus.samples, &cfg, &vocab, &mut Log::none())?;
    println!("{} steps in {:.1}s", cfg.pretrain.steps, start.elapsed().as_secs_f64());
    for task in Task::ALL {
        let (first, last) = outcome.window_means(task, 0.1).expect("task was scheduled");
        println!(
            "{:<14} {first:>8.4} -> {last:>8.4}  (x{:.3})",
            task.name(),
            last / first
        );
    }

    outcome.checkpoint.save(&path)?;
    let back = Checkpoint::load(&path)?;
    back.ensure_config(&cfg.model)?;
    println!(
        "saved {} ({} tensors, {} scalars, config {})",
        path,
        back.params.len(),
        back.params.num_scalars(),
        &back.config_hash()[..12]
    );
    Ok(())
}
