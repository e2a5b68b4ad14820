//! The learning task: data synthesis, the softmax model, and training.

pub mod data;
pub mod model;
pub mod train;

pub use data::{generate_non_iid_data, BlobSpec, Dataset, Owner, Partition};
pub use model::SoftmaxModel;
pub use train::{aggregate, auxiliary_trajectory, global_loss, local_train, participation_loss, solve_optimum, LocalUpdate, Optimum};
