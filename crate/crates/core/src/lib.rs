//! Desk-scale laboratory for task-free online continual learning.

pub mod classifier;
pub mod config;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod ndgrad;
pub mod optim;
pub mod promptsel;
pub mod rng;
pub mod stream;
pub mod trainer;
pub mod weights;

pub use error::{Error, Result};

pub use classifier::{Head, HeadKind, LogitMask};
pub use config::{parse_config, AdapterKind, DataSource, ExperimentConfig};
pub use encoder::{init_encoder, EncoderConfig, EncoderParams, InputPrompt, PromptSet};
pub use experiment::{run_experiment, ExperimentSummary};
pub use metrics::{a_auc, a_last, f_last, AccuracyMatrix, AucRecorder};
pub use ndgrad::{Tape, Tensor, Var};
pub use optim::{AdamConfig, AdamState};
pub use promptsel::{PromptPool, SelectionMode};
pub use rng::Rng;
pub use stream::{Dataset, Minibatch, SiBlurryConfig};
pub use trainer::{run_stream, Adapter, RunOutput, TrainRun};
pub use weights::WeightFile;
