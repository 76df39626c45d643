//! Evaluation suite: assignment, detection mAP, tracking AMOTA, grid IoU,
//! motion and planning errors, and the per-run report.

mod assignment;
mod detection;
mod grid;
mod motion;
mod planning;
mod report;
mod tracking;

pub use assignment::{hungarian, Assignment};
pub use detection::{
    bev_intersection, bev_iou, default_thresholds, map_score, match_counts, Detection, MatchCounts,
    MatchCriterion,
};
pub use grid::{grid_iou, rasterize_points, FAR_RANGE_M, NEAR_RANGE_M};
pub use motion::{motion_errors, MotionErrors, MISS_THRESHOLD_M};
pub use planning::{planning_errors, PlanningErrors, EGO_EXTENT, HORIZONS_S, STEPS_PER_SECOND};
pub use report::MetricsReport;
pub use tracking::{amota, count_errors, AmotaReport, MotaCounts, TrackFrame, TRACK_MATCH_GATE_M};

pub(crate) use report::csv_err;
