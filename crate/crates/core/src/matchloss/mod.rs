//! Bipartite matching, set losses, optimization and the training schedule.

pub mod checkpoint;
pub mod hungarian;
pub mod loss;
pub mod optim;
pub mod train;

pub use checkpoint::Checkpoint;
pub use hungarian::{hungarian, Assignment, CostMatrix};
pub use loss::{
    box_loss_rows, box_pair_cost, hoi_cost_matrix, hoi_match_cost, hoi_set_loss, joint_loss, rel_cost_matrix,
    rel_set_loss, scene_loss, total_loss, total_loss_value, tuple_match_cost, LossTerms, LossWeights, SceneLoss, SetLoss, Task,
};
pub use optim::{AdamW, AdamWConfig};
pub use train::{permutation, StepLog, StepPlan, TrainConfig, TrainMode, Trainer, CSV_HEADER};
