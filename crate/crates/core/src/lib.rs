//! Meningioma grading engine.
//!
//! Whole-slide detections are tiled, scored, aggregated into count grids and
//! sampled regions, then graded with the WHO 2007 meningioma rules. Review
//! sessions replay pathologist actions over the processed case.

pub mod aggregator;
pub mod config;
pub mod detectors;
pub mod error;
pub mod eval;
pub mod grader;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod review;
pub mod session;
pub mod synth;
pub mod tiler;

pub use config::{EngineConfig, ThresholdTable};
pub use error::{Error, Result};
pub use model::{iou, um_to_px, CaseManifest, CriterionKind, Detection, Rect, ReviewStatus, SlideMeta, Stain};
