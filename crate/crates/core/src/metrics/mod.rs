//! Segmentation quality, compute and routing-agreement metrics.

mod assign;
mod compare;
mod iou;
mod report;

pub use assign::{assignment_confusion, marginal, tvd, Confusion};
pub use compare::{entropy_dist_compare, DistComparison, EQUIVALENCE_GAP};
pub use iou::{dataset_iou, iou_per_gigaflop, mean_iou};
pub use report::RunReport;
