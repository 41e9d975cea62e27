//! Two-phase training of a 3D segmentation network from sparse slice
//! annotations: a 2D window classifier trained on the annotated slices
//! labels the rest of the volume, and a 3D U-Net is trained on the union of
//! ground truth and those pseudo-labels under a per-voxel weighted binary
//! cross-entropy.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod fuselabel;
pub mod netops;
pub mod phantom;
pub mod pipeline;
pub mod reduce;
pub mod seg2d;
pub mod seg3d;
pub mod training;
pub mod volgrid;

pub use config::ExperimentConfig;
pub use error::{Error, ErrorKind, Result};
pub use evalkit::{MetricsReport, Scheme};
pub use fuselabel::{Alpha, FusedTargets};
pub use volgrid::{Label, LabelVolume, ProbVolume, Volume3D};
