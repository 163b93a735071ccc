//! Frozen bidirectional language model with visual prompts and adapters.

pub mod autograd;
pub mod bilm;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod optim;
pub mod param;
pub mod rng;
pub mod synth;
pub mod tasks;
pub mod tensor;
pub mod tokenizer;

pub use autograd::{AttentionLayout, GradMode, Graph, Var};
pub use bilm::{BiLm, BiLmConfig, CorruptionRates, MaskedBatch, PretrainConfig};
pub use error::{Error, Result};
pub use fusion::{CaptionPair, CrossModalConfig, FrozenVlm, FusionConfig, ParamReport, Variant, VideoFeatures};
pub use optim::{AdamConfig, LrSchedule};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tensor::{Scalar, Tensor};
pub use tokenizer::{TokenSequence, Vocabulary};
