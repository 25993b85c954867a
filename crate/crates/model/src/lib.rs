//! Adversarial behavior generation: a 1-D U-Net generator conditioned on
//! speech and ramp noise, a speech-conditioned critic, and WGAN-GP training.

pub mod arch;
pub mod autograd;
pub mod checkpoint;
pub mod discriminator;
pub mod generator;
pub mod nn;
pub mod noise;
pub mod training;

pub use arch::{ArchConfig, ModelError};
pub use checkpoint::Checkpoint;
pub use discriminator::Discriminator;
pub use generator::Generator;
pub use noise::{make_noise, NoiseVector};
pub use training::{train, TrainConfig, TrainError};
