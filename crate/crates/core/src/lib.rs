//! Open-set semi-supervised class-incremental learning with per-task
//! subnetworks.
//!
//! A shared dense network is partitioned into per-task subnetworks chosen by
//! learnable importance scores. Weights used by a finished task are frozen,
//! so later tasks cannot disturb it. Each task trains on labeled
//! cross-entropy, a weak/strong contrastive loss over unlabeled data and a
//! confidence-thresholded pseudo-label loss. At inference the logits of every
//! subnetwork that was trained on a class are averaged for that class.
//!
//! Data-parallel loops (matrix kernels, per-subnetwork inference, ablation
//! runs, stream rendering) go through [`par`], which uses rayon with the
//! default `parallel` feature and plain iterators without it. Results are
//! bit-identical either way.

pub mod augment;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod inference;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod par;
pub mod report;
pub mod rng;
pub mod scenario;
pub mod tensor;
pub mod train;
pub mod wsn;

pub use checkpoint::Checkpoint;
pub use config::{AccuracyMetric, RunConfig};
pub use error::{Error, Result};
pub use inference::{
    average_accuracy, ensemble_predict, evaluate_stream, forgetting, AccuracyMatrix, InferenceMode,
    LogitStackEnsemble,
};
pub use losses::{combined_loss, contrastive_u, labeled_ce, pseudo_label_loss, LossBundle, PseudoLabelConfig};
pub use nn::{backward, forward, MlpArchitecture, ParameterSet};
pub use optim::{adamw_step, cosine_lr, AdamWState, CosineSchedule};
pub use report::{AblationReport, RunReport};
pub use scenario::{build_stream, load_stream, save_stream, Experience, StreamSpec, TaskStream};
pub use tensor::Tensor2;
pub use train::{run_ablation, run_experiment, train_task, PreparedStream, TrainState, Trainer};
pub use wsn::{
    commit_task, masked_forward, select_mask, split_gradients, supplemented_score_step,
    ScoredParameterSet, SupplementationRule, TaskMask, WeightMask,
};
