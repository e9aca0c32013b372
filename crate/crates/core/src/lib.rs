//! Detector-agnostic cascade pseudo-labeling for semi-supervised, long-tailed
//! object detection.
//!
//! The crate is organised around the data flow of one training iteration:
//!
//! * [`dataset`] holds images, categories, annotations and scored detections,
//!   and reads/writes COCO-style JSON.
//! * [`geometry`] provides IoU/GIoU, NMS and greedy matching.
//! * [`apm`] keeps per-class confidence queues on labeled proposals and turns
//!   them into per-stage, per-class thresholds `mu_c + sigma_c * eps_k`.
//! * [`cpl`] averages the K stage predictions of a proposal into a teacher
//!   target and gates it per stage against those thresholds.
//! * [`losses`] evaluates the labeled and gated unlabeled loss terms.
//! * [`eval`] computes precision/recall, AP, Fixed AP per class group and
//!   pseudo-label accuracy.
//! * [`synthetic`] generates long-tailed datasets and a simulated cascade
//!   detector; [`toy`] runs a small closed-loop learner on top of them.
//! * [`saod`] builds sparsely-annotated variants of a dataset.
//! * [`cli`] wires everything into reproducible run directories.

pub mod apm;
pub mod cli;
pub mod cpl;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod par;
pub mod rng;
pub mod saod;
pub mod synthetic;
pub mod toy;

pub use dataset::{
    Annotation, BBox, BinningScheme, Category, ClassGroup, DatasetBundle, DetectionRecord,
    ImageInfo, ScoreSemantics, Split,
};
