use serde::{Deserialize, Serialize};

use super::detection::dist;
use crate::error::{Error, Result};
use crate::model::TrajectorySet;

/// Default miss-rate threshold, metres.
pub const MISS_THRESHOLD_M: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionErrors {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
}

/// Best-of-modes displacement errors, averaged over agents. `gt[a]` is the
/// future of predicted agent `a`.
pub fn motion_errors(pred: &TrajectorySet, gt: &[Vec<[f64; 2]>], delta: f64) -> Result<MotionErrors> {
    if pred.agents == 0 {
        return Err(Error::Undefined("motion errors with zero agents".into()));
    }
    if gt.len() != pred.agents {
        return Err(Error::dim("motion_errors", format!("{} futures for {} agents", gt.len(), pred.agents)));
    }
    if pred.modes == 0 || pred.steps == 0 {
        return Err(Error::Contract("trajectories need at least one mode and step".into()));
    }
    let (mut ade_sum, mut fde_sum, mut misses) = (0.0, 0.0, 0usize);
    for (a, future) in gt.iter().enumerate() {
        if future.len() != pred.steps {
            return Err(Error::dim(
                "motion_errors",
                format!("future of agent {a} has {} steps, expected {}", future.len(), pred.steps),
            ));
        }
        let mut best_ade = f64::INFINITY;
        let mut best_fde = f64::INFINITY;
        for m in 0..pred.modes {
            let errs: Vec<f64> = (0..pred.steps).map(|t| dist(pred.point(a, m, t), future[t])).collect();
            best_ade = best_ade.min(errs.iter().sum::<f64>() / pred.steps as f64);
            best_fde = best_fde.min(errs[pred.steps - 1]);
        }
        ade_sum += best_ade;
        fde_sum += best_fde;
        misses += (best_fde > delta) as usize;
    }
    let n = pred.agents as f64;
    Ok(MotionErrors { min_ade: ade_sum / n, min_fde: fde_sum / n, miss_rate: misses as f64 / n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn straight(steps: usize) -> Vec<[f64; 2]> {
        (1..=steps).map(|t| [t as f64, 0.0]).collect()
    }

    fn set(modes: &[Vec<[f64; 2]>]) -> TrajectorySet {
        let steps = modes[0].len();
        let points = modes.iter().flatten().flatten().copied().collect();
        TrajectorySet::new(1, modes.len(), steps, points, vec![1.0 / modes.len() as f64; modes.len()]).unwrap()
    }

    #[test]
    fn worked_values() {
        let gt = straight(12);
        let shifted: Vec<_> = gt.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let far: Vec<_> = gt.iter().map(|p| [p[0], p[1] + 30.0]).collect();
        let e = motion_errors(&set(&[far.clone(), gt.clone()]), &[gt.clone()], 2.0).unwrap();
        assert_eq!((e.min_ade, e.min_fde, e.miss_rate), (0.0, 0.0, 0.0));
        let e = motion_errors(&set(&[shifted]), &[gt.clone()], 2.0).unwrap();
        assert_eq!((e.min_ade, e.min_fde, e.miss_rate), (1.0, 1.0, 0.0));
        let mut last = gt.clone();
        last[11][0] += 3.0;
        let e = motion_errors(&set(&[last]), &[gt.clone()], 2.0).unwrap();
        assert_eq!(e.min_fde, 3.0);
        assert_eq!(e.miss_rate, 1.0);
        assert_eq!(e.min_ade, 0.25);
    }

    #[test]
    fn modes_chosen_independently() {
        // mode 0 is best on average, mode 1 ends exactly on target
        let gt = straight(4);
        let m0: Vec<_> = gt.iter().map(|p| [p[0], 0.5]).collect();
        let mut m1: Vec<_> = gt.iter().map(|p| [p[0], 3.0]).collect();
        m1[3] = gt[3];
        let e = motion_errors(&set(&[m0, m1]), &[gt], 2.0).unwrap();
        assert_eq!(e.min_ade, 0.5);
        assert_eq!(e.min_fde, 0.0);
    }

    #[test]
    fn errors() {
        let empty = TrajectorySet::empty(6, 12);
        assert!(matches!(motion_errors(&empty, &[], 2.0), Err(Error::Undefined(_))));
        let s = set(&[straight(12)]);
        assert!(motion_errors(&s, &[straight(11)], 2.0).is_err());
        assert!(motion_errors(&s, &[], 2.0).is_err());
    }

    proptest! {
        #[test]
        fn min_ade_below_every_mode(offsets in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..6)) {
            let gt = straight(6);
            let modes: Vec<Vec<[f64; 2]>> = offsets
                .iter()
                .enumerate()
                .map(|(m, &(dx, dy))| gt.iter().enumerate().map(|(t, p)| [p[0] + dx * t as f64 / 5.0, p[1] + dy + m as f64 * 0.1]).collect())
                .collect();
            let e = motion_errors(&set(&modes), &[gt.clone()], 2.0).unwrap();
            for m in &modes {
                let ade = (0..6).map(|t| dist(m[t], gt[t])).sum::<f64>() / 6.0;
                prop_assert!(e.min_ade <= ade);
            }
            prop_assert!((0.0..=1.0).contains(&e.miss_rate));
        }
    }
}
