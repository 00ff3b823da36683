//! Interconnected neurons over selective state-space memories: a
//! character-level language model where `N` weight-sharing neurons each run
//! a Mamba-style recurrence and exchange messages by attention across the
//! neuron axis. Includes the tensor/autodiff engine it runs on, training,
//! data handling and interpretability analysis.

pub mod analysis;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod param;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use analysis::{analyze, connectivity_stats, export_report, ActivationStats, ConnectivityStats, Report};
pub use data::{bpc, evaluate, generate, perplexity, Batch, Batcher, CorpusSplit, Vocab};
pub use error::{Error, Result};
pub use graph::{neuron_attention, AttentionMap, CommunicationMode};
pub use model::{complexity_probe, ForwardOptions, InnConfig, InnModel};
pub use param::Param;
pub use ssm::{mamba_block, selective_scan};
pub use tensor::{no_grad, Element, NamedTensor, Tensor};
pub use train::{
    adamw_step, clip_grad_norm, onecycle_lr, run_ablation, run_sweep, Checkpoint, OptimizerState, RunConfig, SchedulerConfig,
    TrainConfig, Trainer,
};
