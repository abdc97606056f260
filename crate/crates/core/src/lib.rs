//! Pairwise deep learning feature (PDLF) segmentation: corner-driven patch
//! features, Delaunay pairing into a joint feature map, and a small
//! encoder-decoder network that concatenates the map at one encoder block.

pub mod corners;
pub mod dataset;
pub mod delaunay;
pub mod error;
pub mod features;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod overlay;
pub mod pairing;
pub mod pipeline;
pub mod tensor;

pub use corners::{detect_corners, CornerPoint, DetectorConfig};
pub use dataset::{augment, split, synth_weak, Perturbation, SamplePair, SplitSpec, SynthConfig};
pub use delaunay::{triangulate, Point2, Triangulation};
pub use error::{Error, Result};
pub use features::{extract_features, BuiltinExtractor, Extractor, FeatureRecord};
pub use image::{Image, Mask, Transform};
pub use metrics::{compute_metrics, confusion, otsu_threshold, ConfusionCounts, MetricsReport};
pub use nn::{NetworkConfig, NetworkParams, TrainConfig};
pub use pairing::{joint_map_from_records, JointFeatureMap};
pub use pipeline::{run_stage, PipelineConfig, Stage, StageIo, StageReport};
pub use tensor::Tensor;
