//! Gradient descent on CP tensor factorizations, with tooling to check the
//! implicit-regularization behaviour of the trajectory: conserved
//! unbalancedness, component-norm growth bounds, incremental learning, and
//! the small-initialization rank-one escape.

pub mod cp;
pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod optim;
pub mod probe;
pub mod problems;
pub mod rank_one;
pub mod rng;
pub mod tensor;

pub use cp::{initialize, CpFactorization, CpGradient, InitKind, InitSpec};
pub use error::{Error, Result};
pub use loss::{LossKind, MeasurementSet, ObservationSet, Problem};
pub use optim::{train, LrScheme, TrainConfig, TrainOutcome, Trainer, TrajectoryRecord};
pub use tensor::{Matrix, Shape, Tensor};
