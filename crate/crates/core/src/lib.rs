//! Viewpoint-robustness benchmark for retrieval-based dense segmentation.
//!
//! Frames of each multi-view capture are binned by rotation angle relative
//! to the first frame. Patch features from a frozen encoder for some bins
//! fill a memory bank; frames from the remaining bins are segmented by
//! k-nearest-neighbor label transfer and scored with mIoU.
//!
//! Modules, bottom-up:
//!
//! - [`pose`]: COLMAP `images.txt` parsing and rotation angles.
//! - [`binning`]: angle bins, frame selection, subset manifest, angle stats.
//! - [`featstore`]: `PFV1` feature files, masks, label grids.
//! - [`membank`]: capacity-bounded bank and exact sharded top-k search.
//! - [`segmenter`]: temperature-softmax label aggregation and mask prediction.
//! - [`metrics`]: IoU, degradation curves, breaking points, memory gains.
//! - [`harness`]: experiment runners, CSV reports, overlays.

pub mod binning;
pub mod featstore;
pub mod harness;
pub mod membank;
pub mod metrics;
pub mod pose;
pub mod segmenter;
pub mod synthetic;
