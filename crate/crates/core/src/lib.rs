pub mod dataset;
pub mod detect;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod index;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod stego;
pub mod storage;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use dataset::{LabeledDataset, Split};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use index::{CodeKind, EmbeddingScheme, IndexerConfig, SpatialIndexer};
pub use kernels::{Activation, PoolKind};
pub use layers::{Layer, LayerKind, LayerSpec};
pub use model::{Direction, Model};
pub use optim::OptimizerKind;
pub use params::{ParamId, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use train::{TrainConfig, TrainReport};
