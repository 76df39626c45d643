use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An oriented BEV box with a confidence score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: [f64; 2],
    /// Length along the heading, then width.
    pub extent: [f64; 2],
    pub heading: f64,
    pub score: f64,
    #[serde(default)]
    pub track_id: Option<u64>,
}

impl Detection {
    pub fn new(center: [f64; 2], extent: [f64; 2], heading: f64, score: f64) -> Result<Self> {
        let d = Detection { center, extent, heading, score, track_id: None };
        d.validate()?;
        Ok(d)
    }

    pub fn with_track(mut self, id: u64) -> Self {
        self.track_id = Some(id);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return Err(Error::Contract(format!("box extent must be positive, got {:?}", self.extent)));
        }
        let finite = self.center.iter().chain(&self.extent).all(|v| v.is_finite());
        if !finite || !self.heading.is_finite() || !self.score.is_finite() {
            return Err(Error::Numeric("detection fields must be finite".into()));
        }
        Ok(())
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        box_corners(self.center, self.extent, self.heading)
    }

    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }
}

pub(crate) fn box_corners(center: [f64; 2], extent: [f64; 2], heading: f64) -> [[f64; 2]; 4] {
    let (s, c) = heading.sin_cos();
    let (hl, hw) = (extent[0] / 2.0, extent[1] / 2.0);
    let at = |a: f64, b: f64| [center[0] + a * c - b * s, center[1] + a * s + b * c];
    [at(hl, hw), at(-hl, hw), at(-hl, -hw), at(hl, -hw)]
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    let twice: f64 = (0..n)
        .map(|i| {
            let (a, b) = (p[i], p[(i + 1) % n]);
            a[0] * b[1] - a[1] * b[0]
        })
        .sum();
    twice.abs() / 2.0
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection area of two oriented boxes.
pub fn bev_intersection(a: &Detection, b: &Detection) -> f64 {
    let clipped = clip_polygon(&a.corners(), &b.corners());
    if clipped.len() < 3 {
        0.0
    } else {
        polygon_area(&clipped)
    }
}

/// Rotated-box IoU in the ground plane. Geometrically identical boxes give
/// exactly 1.
pub fn bev_iou(a: &Detection, b: &Detection) -> f64 {
    if a.center == b.center && a.extent == b.extent && a.heading == b.heading {
        return 1.0;
    }
    let inter = bev_intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// How a prediction qualifies as a match at threshold `r`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCriterion {
    /// BEV IoU ≥ r.
    #[default]
    BevIou,
    /// Centre distance ≤ r metres.
    CenterDistance,
}

/// `{1/(n−1), 2/(n−1), …, 1}`.
pub fn default_thresholds(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![1.0];
    }
    (1..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// True positives, false positives and false negatives at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    /// `TP / (TP + FP + FN)`, with an empty denominator scoring 1.
    pub fn ap(&self) -> f64 {
        let denom = self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            self.tp as f64 / denom as f64
        }
    }
}

/// Greedy matching: predictions in descending score (ties by index) each
/// take the best still-free ground truth that passes the criterion.
pub fn match_counts(
    preds: &[Detection],
    gts: &[Detection],
    criterion: MatchCriterion,
    threshold: f64,
) -> MatchCounts {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0;
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            // larger quality is better for both criteria
            let (ok, quality) = match criterion {
                MatchCriterion::BevIou => {
                    let iou = bev_iou(&preds[p], gt);
                    (iou >= threshold, iou)
                }
                MatchCriterion::CenterDistance => {
                    let d = dist(preds[p].center, gt.center);
                    (d <= threshold, -d)
                }
            };
            if ok && best.map_or(true, |(_, q)| quality > q) {
                best = Some((g, quality));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            tp += 1;
        }
    }
    MatchCounts { tp, fp: preds.len() - tp, fn_: gts.len() - tp }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean of `TP/(TP+FP+FN)` over `thresholds`.
pub fn map_score(
    preds: &[Detection],
    gts: &[Detection],
    criterion: MatchCriterion,
    thresholds: &[f64],
) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Contract("map_score needs at least one threshold".into()));
    }
    for d in preds.iter().chain(gts) {
        d.validate()?;
    }
    let total: f64 = thresholds
        .iter()
        .map(|&r| match_counts(preds, gts, criterion, r).ap())
        .sum();
    Ok(total / thresholds.len() as f64)
}
