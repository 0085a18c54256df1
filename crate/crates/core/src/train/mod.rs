//! Reverse-mode gradients, losses, Adam, and the training loop.

mod gradcheck;
pub mod graph;
mod loss;
mod optim;
mod trainer;

pub use gradcheck::{
    grad_check, gradcheck_problem, relative_deviation, GradCheckReport, GroupDeviation, GRADCHECK_FLOOR,
    GRADCHECK_STEP, GRADCHECK_TOLERANCE,
};
pub use graph::{Fault, Gradients, NodeId, Tape};
pub use loss::{h1_norm_sq, h1_norm_sq_grad, rel_h1, rel_h1_sq, rel_l2, rel_l2_sq, LossKind};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use trainer::{evaluate, thread_pool, train, train_model, EpochRecord, Metrics, TrainConfig, TrainHistory};
