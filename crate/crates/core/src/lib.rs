//! Video captioning with visual temporal attention, attention over the word
//! history, a gated three-LSTM decoder, and a score-gated mixed
//! cross-entropy / self-critical fine-tuning stage.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use autodiff::{check_gradient, Gradients, Graph, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::TrainingConfig;
pub use data::{build_vocab, generate_synthetic_dataset, load_dataset, save_dataset, DatasetRecord, EncodedRecord, SyntheticSpec, Vocabulary};
pub use decoder::StepTrace;
pub use decoding::{beam_decode, greedy_decode, sample_decode, DecodeResult};
pub use encoder::FeatureSequence;
pub use error::{Error, Result};
pub use metrics::{bleu_n, evaluated_score, rouge_l, summarize, MetricSummary, ScoreReport};
pub use model::{AttentionLink, GateKind, Model, ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use training::{
    evaluate, gate_decision, mixed_gradient, normalize_scores, scst_gradient, scst_gradient_for_sample, sweep_lambda, xe_loss, EpochReport,
    GateDecision, LambdaResult, MixedGradient, ScstDiagnostics, Trainer,
};
