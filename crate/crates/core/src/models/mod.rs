//! Networks assembled from layers, one per uncertainty method, behind a
//! common indexed forward pass; training and Monte Carlo prediction.

mod architecture;
mod checkpoint;
mod method;
mod network;
mod predict;
mod train;

pub use architecture::{Architecture, LayerSpec, MNIST_CLASSES, MNIST_SHAPE};
pub use method::MethodConfig;
pub use network::{hypermodel_materialize, EpistemicIndex, Model};
pub use predict::{moments, PredictiveSummary};
pub use train::{train, train_with_member_streams, LossKind, Targets, TrainConfig, TrainingSet, TrainingTrace};
