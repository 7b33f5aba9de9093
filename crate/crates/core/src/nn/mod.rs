//! Differentiable models, their objectives and the optimizer.

pub mod losses;
pub mod networks;
pub mod optim;
pub mod params;

pub use losses::{discriminator_loss, generator_adversarial_loss, l2_on_tape, weighted_l2_loss, AdversarialForm};
pub use networks::{
    fut_matrix, full_matrix, obs_matrix, one_hot_matrix, row_to_points, BaselineConfig, CellKind,
    DiscriminatorConfig, EncoderKind, GeneratorConfig,
};
pub use optim::Adam;
pub use params::{Bound, Checkpoint, ModelParams};
