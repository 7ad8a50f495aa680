//! Core algorithms for patch-based lung nodule detection on chest radiographs.
//!
//! The pipeline stages are:
//!
//! 1. **Segment** – a lung mask per radiograph ([`segbaseline`]), or a mask read from disk.
//! 2. **Grid** – mask to per-lung bounding boxes, boxes to an overlapping patch grid ([`lunggrid`]).
//! 3. **Label** – nodule boxes or annotator clicks to per-patch labels ([`labels`]).
//! 4. **Preprocess** – crop, aspect-preserving resize with padding, normalization and
//!    augmentation ([`imaging`]).
//! 5. **Classify** – a small residual CNN trained with weighted cross-entropy, warm-up and
//!    cosine annealing, plus class activation maps ([`nnet`]).
//! 6. **Evaluate** – IoU, AUROC, AUPR, sensitivity/specificity and subgroup reports ([`metrics`]).
//!
//! [`synth`] generates deterministic synthetic radiographs with known ground truth and
//! [`pipeline`] strings the stages together for batch runs.

pub mod error;
pub mod imaging;
pub mod labels;
pub mod lunggrid;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod segbaseline;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use imaging::{AugmentParams, Image, Tensor};
pub use labels::{
    AnnotationRecord, CaseRecord, LabelMode, NoduleBox, PatchLabelVector, Source, Split,
};
pub use lunggrid::{GridSpec, Mask, PatchGrid, Rect};
pub use metrics::{Confusion, EvalReport, ScoredItem};
pub use nnet::{Heatmap, TinyResNet, TrainConfig};
pub use pipeline::{PatchGeometry, PrepareOptions, PreparedCase};
pub use segbaseline::{SegConfig, ThresholdMode};
