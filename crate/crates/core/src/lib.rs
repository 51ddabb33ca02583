//! Tooth instance segmentation on dental CBCT volumes: geometry-aware
//! losses, field targets, marker-based watershed post-processing,
//! evaluation metrics and synthetic phantoms.

pub mod error;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod instance;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod phantom;
pub mod preprocess;
pub mod volume;
pub mod watershed;

pub use error::{Error, Result};
pub use grid::{Connectivity, Grid};
pub use instance::{InstanceMap, InstanceRecord};
pub use volume::{Payload, PayloadKind, Volume, MAX_TOOTH_CLASS, NUM_CLASSES};
