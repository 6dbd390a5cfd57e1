//! Contrastive distillation of sentence encoders.
//!
//! A small f64 autodiff engine drives two training stages: distilling a
//! frozen teacher into a smaller student over unlabeled text, then
//! finetuning the student on (anchor, positive, negative) triplets.
//! Encoders are scored on STS pairs by Spearman correlation.

pub mod adam;
pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod pipeline;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use adam::{adam_step, AdamState};
pub use bank::MemoryBank;
pub use checkpoint::Checkpoint;
pub use encoder::{Encoder, EncoderConfig, SentenceEncoder};
pub use error::{Error, Result};
pub use eval::{spearman, sts_evaluate, EvalReport, StsPair};
pub use gradcheck::{grad_check, GradCheckReport};
pub use losses::{ckd_loss, kd_mse_loss, supervised_cl_loss, Temperature};
pub use pipeline::{run_disco, run_distill, run_finetune, Stage, TrainConfig};
pub use tape::{Gradients, Params, Tape, Var};
pub use tensor::Tensor;
pub use vocab::{Sentence, Vocabulary};
