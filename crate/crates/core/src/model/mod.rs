//! 3D residual classifier, training loop and checkpoints.

mod checkpoint;
mod gradcheck;
mod layers;
mod resnet;
mod scalar;
mod train;

pub use checkpoint::{config_digest, Checkpoint};
pub use gradcheck::{
    directional_losses, gradient_check, head_symmetry_projection, relative_error, synthetic_batch, train_loss,
    GradCheckConfig, GradCheckReport, GradEntry, REL_FLOOR,
};
pub use layers::{Act, ConvSpec};
pub use resnet::{cross_entropy, softmax2, NetworkConfig, ResNet3d, Tape, NUM_CLASSES};
pub use scalar::Scalar;
pub use train::{
    evaluate_loss, history_to_tsv, train, train_with, write_history, Adam, EpochRecord, InstanceSource,
    PlateauScheduler, TrainConfig, TrainOutcome,
};
