//! Two-stage anchor-based Gaussian splatting for 3D scene super-resolution:
//! a coarse stage fitted to low-resolution views, then a fine stage that
//! learns high-resolution detail from pseudo-labels with variational
//! supplementary features, multi-view voting densification and
//! uncertainty-weighted losses. Everything runs on the CPU.

pub mod camera;
pub mod decoder;
pub mod densify;
pub mod error;
pub mod field;
pub mod image;
pub mod io;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod synth;
pub mod train;

pub use camera::Camera;
pub use decoder::DecoderSet;
pub use densify::DensifyConfig;
pub use error::{Error, Result};
pub use field::{FeatureField, FieldConfig};
pub use image::Image;
pub use io::{Checkpoint, SceneDataset, Stage};
pub use losses::LossWeights;
pub use model::{Model, ModelConfig};
pub use raster::{rasterize, RenderConfig, RenderOutput};
pub use scene::{Anchor, NeuralGaussian, Origin};
pub use synth::{synth, SynthSceneSpec};
pub use train::{train_coarse, train_fine, TrainConfig};
