//! Feed-forward multi-style neural style transfer.
//!
//! The crate covers the full stack: a frozen VGG-16 feature extractor
//! ([`backbone`]), Gram/content/style/TV losses with analytic gradients
//! ([`losses`]), a transformation network with conditional instance
//! normalisation ([`transform`]), training and parameter studies
//! ([`trainer`]), and an HTTP inference service ([`service`]).

pub mod archive;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fixtures;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod service;
pub mod tensor;
pub mod trainer;
pub mod transform;

pub use backbone::{load_backbone, Backbone, BackboneConfig, Device, FeatureMap, FeatureMaps, LayerId};
pub use checkpoint::{export_checkpoint, load_checkpoint, Checkpoint, Provenance};
pub use config::Config;
pub use error::{Error, Result};
pub use losses::{content_loss, gram, style_loss, total_loss, tv_loss, GramMaps, GramMatrix, LossBreakdown, LossWeights};
pub use raster::ImageTensor;
pub use service::{preprocess, Engine, Model, Resolution, ServiceConfig, ServiceError, StylizeRequest, StylizeResponse};
pub use tensor::{Real, Tensor};
pub use trainer::{
    add_style, precompute_style_targets, style_set_dispersion, sweep_batch_size, sweep_epochs, sweep_style_weight, train,
    LossHistory, StyleSpec, SweepReport, TrainConfig,
};
pub use transform::{build_network, cin, ArchConfig, StyleBank, StyleEntry, TransformNet};
