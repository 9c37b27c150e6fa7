//! Multimodal (text, visual, acoustic) transformer pre-training with
//! conditional masking, and emotion recognition through either a classifier
//! head or a masked-word prompt.
//!
//! Everything runs on a small hand-written reverse-mode autodiff over `f64`
//! tensors. Data comes from a deterministic synthetic generator.
//!
//! ```no_run
//! use mmemo::{corpus, toy, tokenizer::Vocab, trainer};
//!
//! let vocab = Vocab::builtin();
//! let unlabeled = corpus::generate(&toy::pretrain_spec(), &vocab)?;
//! let outcome = trainer::pretrain(&unlabeled.samples, &toy::run_config(), &vocab, &mut trainer::Log::none())?;
//! outcome.checkpoint.save("out/checkpoint.ckpt")?;
//! # Ok::<(), mmemo::Error>(())
//! ```

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod downstream;
pub mod embed;
pub mod emotion;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod masking;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod tokenizer;
pub mod toy;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use emotion::EmotionClass;
pub use error::{Error, Result};
pub use tensor::Tensor;
