use serde::{Deserialize, Serialize};

use super::detection::{box_corners, dist, Detection};
use crate::error::{Error, Result};

/// Evaluated horizons in seconds.
pub const HORIZONS_S: [usize; 3] = [1, 2, 3];
/// Plan steps per second.
pub const STEPS_PER_SECOND: usize = 2;
/// Default ego footprint, length × width in metres.
pub const EGO_EXTENT: [f64; 2] = [4.0, 1.8];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlanningErrors {
    pub l2: [f64; 3],
    pub l2_avg: f64,
    pub collision: [f64; 3],
    pub collision_avg: f64,
}

impl PlanningErrors {
    /// Element-wise mean over evaluated frames.
    pub fn mean(items: &[PlanningErrors]) -> Result<PlanningErrors> {
        if items.is_empty() {
            return Err(Error::Undefined("planning errors over zero frames".into()));
        }
        let n = items.len() as f64;
        let mut out = PlanningErrors::default();
        for it in items {
            for h in 0..3 {
                out.l2[h] += it.l2[h] / n;
                out.collision[h] += it.collision[h] / n;
            }
        }
        out.l2_avg = out.l2.iter().sum::<f64>() / 3.0;
        out.collision_avg = out.collision.iter().sum::<f64>() / 3.0;
        Ok(out)
    }
}

/// L2 error and collision flags of one plan at the 1/2/3 s horizons.
///
/// `obstacles[t]` holds the boxes present at plan step `t`; an empty slice
/// means no obstacles at any step. The ego box is placed at each waypoint
/// and at the midpoint of each segment, heading along the segment.
pub fn planning_errors(
    plan: &[[f64; 2]],
    expert: &[[f64; 2]],
    obstacles: &[Vec<Detection>],
    ego_extent: [f64; 2],
) -> Result<PlanningErrors> {
    let steps = HORIZONS_S[2] * STEPS_PER_SECOND;
    if plan.len() < steps || expert.len() != plan.len() {
        return Err(Error::dim(
            "planning_errors",
            format!("plan {} / expert {} steps, need {steps}", plan.len(), expert.len()),
        ));
    }
    if !obstacles.is_empty() && obstacles.len() != plan.len() {
        return Err(Error::dim("planning_errors", "one obstacle list per plan step"));
    }
    if !(ego_extent[0] > 0.0 && ego_extent[1] > 0.0) {
        return Err(Error::Contract("ego extent must be positive".into()));
    }
    let err: Vec<f64> = plan.iter().zip(expert).map(|(&p, &e)| dist(p, e)).collect();
    let hits = collision_steps(plan, obstacles, ego_extent);

    let mut out = PlanningErrors::default();
    for (h, &secs) in HORIZONS_S.iter().enumerate() {
        let upto = secs * STEPS_PER_SECOND;
        out.l2[h] = err[..upto].iter().sum::<f64>() / upto as f64;
        out.collision[h] = if hits[..upto].iter().any(|&c| c) { 1.0 } else { 0.0 };
    }
    out.l2_avg = out.l2.iter().sum::<f64>() / 3.0;
    out.collision_avg = out.collision.iter().sum::<f64>() / 3.0;
    Ok(out)
}

/// Per step, whether the ego box swept from the previous waypoint overlaps
/// any obstacle of that step.
fn collision_steps(plan: &[[f64; 2]], obstacles: &[Vec<Detection>], extent: [f64; 2]) -> Vec<bool> {
    let mut heading = 0.0;
    let mut prev = [0.0, 0.0];
    let mut out = vec![false; plan.len()];
    for (t, &p) in plan.iter().enumerate() {
        let (dx, dy) = (p[0] - prev[0], p[1] - prev[1]);
        if dx.hypot(dy) > 1e-6 {
            heading = dy.atan2(dx);
        }
        let mid = [(p[0] + prev[0]) / 2.0, (p[1] + prev[1]) / 2.0];
        if let Some(obs) = obstacles.get(t) {
            let ego = [box_corners(p, extent, heading), box_corners(mid, extent, heading)];
            out[t] = obs.iter().any(|o| ego.iter().any(|e| boxes_overlap(e, &o.corners())));
        }
        prev = p;
    }
    out
}

/// Separating-axis test for two convex quadrilaterals.
pub(crate) fn boxes_overlap(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> bool {
    for poly in [a, b] {
        for i in 0..4 {
            let (p, q) = (poly[i], poly[(i + 1) % 4]);
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |pts: &[[f64; 2]; 4]| {
                pts.iter().map(|v| v[0] * axis[0] + v[1] * axis[1]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
            };
            let (a_lo, a_hi) = proj(a);
            let (b_lo, b_hi) = proj(b);
            if a_hi <= b_lo || b_hi <= a_lo {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::detection::bev_intersection;
    use proptest::prelude::*;

    fn straight() -> Vec<[f64; 2]> {
        (1..=6).map(|t| [2.5 * t as f64, 0.0]).collect()
    }

    #[test]
    fn perfect_plan() {
        let e = planning_errors(&straight(), &straight(), &[], EGO_EXTENT).unwrap();
        assert_eq!(e, PlanningErrors::default());
    }

    #[test]
    fn constant_lateral_offset() {
        let off: Vec<_> = straight().iter().map(|p| [p[0], p[1] + 1.0]).collect();
        let e = planning_errors(&off, &straight(), &[], EGO_EXTENT).unwrap();
        assert_eq!(e.l2, [1.0, 1.0, 1.0]);
        assert_eq!(e.l2_avg, 1.0);
    }

    #[test]
    fn horizon_prefix_means() {
        // error t at step t (1-based)
        let plan: Vec<_> = straight().iter().enumerate().map(|(i, p)| [p[0], (i + 1) as f64]).collect();
        let e = planning_errors(&plan, &straight(), &[], EGO_EXTENT).unwrap();
        assert_eq!(e.l2, [1.5, 2.5, 3.5]);
    }

    #[test]
    fn obstacle_at_step_two() {
        let mut obs = vec![Vec::new(); 6];
        obs[1].push(Detection::new([5.0, 0.0], [1.0, 1.0], 0.0, 1.0).unwrap());
        let e = planning_errors(&straight(), &straight(), &obs, EGO_EXTENT).unwrap();
        assert_eq!(e.collision, [1.0, 1.0, 1.0]);
        assert_eq!(e.collision_avg, 1.0);
        // the same box at step 5 only counts from the 3 s horizon
        let mut late = vec![Vec::new(); 6];
        late[4].push(Detection::new([12.5, 0.0], [1.0, 1.0], 0.0, 1.0).unwrap());
        let e = planning_errors(&straight(), &straight(), &late, EGO_EXTENT).unwrap();
        assert_eq!(e.collision, [0.0, 0.0, 1.0]);
        // an obstacle 5 m to the side never touches the 1.8 m wide ego box
        let mut side = vec![Vec::new(); 6];
        side[1].push(Detection::new([5.0, 5.0], [1.0, 1.0], 0.0, 1.0).unwrap());
        let e = planning_errors(&straight(), &straight(), &side, EGO_EXTENT).unwrap();
        assert_eq!(e.collision_avg, 0.0);
    }

    #[test]
    fn midpoint_catches_tunnelling() {
        // 10 m jumps skip over a small box at x=5 unless the midpoint is checked
        let plan: Vec<_> = (1..=6).map(|t| [10.0 * t as f64, 0.0]).collect();
        let mut obs = vec![Vec::new(); 6];
        obs[0].push(Detection::new([5.0, 0.0], [0.5, 0.5], 0.0, 1.0).unwrap());
        let e = planning_errors(&plan, &plan, &obs, EGO_EXTENT).unwrap();
        assert_eq!(e.collision[0], 1.0);
    }

    #[test]
    fn bad_shapes() {
        assert!(planning_errors(&straight()[..5], &straight()[..5], &[], EGO_EXTENT).is_err());
        assert!(planning_errors(&straight(), &straight(), &[vec![]], EGO_EXTENT).is_err());
    }

    #[test]
    fn mean_over_frames() {
        let a = PlanningErrors { l2: [1.0, 2.0, 3.0], l2_avg: 2.0, collision: [0.0, 0.0, 1.0], collision_avg: 1.0 / 3.0 };
        let m = PlanningErrors::mean(&[a, PlanningErrors::default()]).unwrap();
        assert_eq!(m.l2, [0.5, 1.0, 1.5]);
        assert_eq!(m.collision, [0.0, 0.0, 0.5]);
        assert!(PlanningErrors::mean(&[]).is_err());
    }

    proptest! {
        #[test]
        fn sat_agrees_with_clipped_area(
            ax in -4.0..4.0f64, ay in -4.0..4.0f64, ah in -3.2..3.2f64,
            bh in -3.2..3.2f64, l in 0.5..5.0f64, w in 0.5..3.0f64,
        ) {
            let a = Detection::new([ax, ay], [l, w], ah, 1.0).unwrap();
            let b = Detection::new([0.0, 0.0], [w + 0.5, l], bh, 1.0).unwrap();
            let area = bev_intersection(&a, &b);
            let sat = boxes_overlap(&a.corners(), &b.corners());
            if area > 1e-6 { prop_assert!(sat); }
            if !sat { prop_assert!(area < 1e-9); }
        }
    }
}
