use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::assignment::hungarian;
use super::detection::{dist, Detection};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Centre-distance gate for associating tracks with ground truth, metres.
pub const TRACK_MATCH_GATE_M: f64 = 2.0;

/// Predictions and ground truth of one frame. Ground-truth `track_id`s are
/// object identities; a missing prediction id never matches a previous one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackFrame {
    pub preds: Vec<Detection>,
    pub gts: Vec<Detection>,
}

/// Error counts at one recall point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotaCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub gt: usize,
}

impl MotaCounts {
    /// `max(0, 1 − (FN + FP + IDSW − (1−r)·GT)/(r·GT))`, capped at 1.
    pub fn mota(&self, r: f64) -> f64 {
        let gt = self.gt as f64;
        let num = (self.fn_ + self.fp + self.idsw) as f64 - (1.0 - r) * gt;
        (1.0 - num / (r * gt)).clamp(0.0, 1.0)
    }
}

/// Evaluates frames keeping only predictions whose global rank (score
/// descending, then frame, then index) is below `keep`.
pub fn count_errors(frames: &[TrackFrame], keep: usize) -> Result<MotaCounts> {
    let ranks = global_ranks(frames);
    let mut out = MotaCounts::default();
    let mut last_pred_id: HashMap<u64, (usize, Option<u64>)> = HashMap::new();
    for (f, frame) in frames.iter().enumerate() {
        let kept: Vec<usize> = (0..frame.preds.len()).filter(|&i| ranks[f][i] < keep).collect();
        let cost = Matrix::from_vec(
            kept.len(),
            frame.gts.len(),
            kept.iter()
                .flat_map(|&p| frame.gts.iter().map(move |g| dist(frame.preds[p].center, g.center)))
                .collect(),
        )?;
        let a = hungarian(&cost, Some(TRACK_MATCH_GATE_M))?;
        out.tp += a.pairs.len();
        out.fp += a.unmatched_preds.len();
        out.fn_ += a.unmatched_gts.len();
        out.gt += frame.gts.len();
        for &(p, g) in &a.pairs {
            let Some(gt_id) = frame.gts[g].track_id else { continue };
            let pred_id = frame.preds[kept[p]].track_id;
            if let Some(&(_, prev)) = last_pred_id.get(&gt_id) {
                if prev.is_none() || prev != pred_id {
                    out.idsw += 1;
                }
            }
            last_pred_id.insert(gt_id, (f, pred_id));
        }
    }
    Ok(out)
}

fn global_ranks(frames: &[TrackFrame]) -> Vec<Vec<usize>> {
    let mut all: Vec<(f64, usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(f, fr)| fr.preds.iter().enumerate().map(move |(i, d)| (d.score, f, i)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ranks: Vec<Vec<usize>> = frames.iter().map(|f| vec![0; f.preds.len()]).collect();
    for (rank, &(_, f, i)) in all.iter().enumerate() {
        ranks[f][i] = rank;
    }
    ranks
}

/// Per-recall-point breakdown of an AMOTA evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmotaReport {
    pub amota: f64,
    pub recalls: Vec<f64>,
    pub mota: Vec<f64>,
    /// `None` where the recall point is unreachable (MOTA counted as 0).
    pub counts: Vec<Option<MotaCounts>>,
}

/// AMOTA over the recall points `{1/(n−1), …, 1}`. For each point the
/// shortest score-ordered prefix of predictions reaching the recall is
/// evaluated.
pub fn amota(frames: &[TrackFrame], n: usize) -> Result<AmotaReport> {
    if n < 2 {
        return Err(Error::Contract(format!("amota needs n >= 2 recall points, got {n}")));
    }
    for d in frames.iter().flat_map(|f| f.preds.iter().chain(&f.gts)) {
        d.validate()?;
    }
    let gt: usize = frames.iter().map(|f| f.gts.len()).sum();
    if gt == 0 {
        return Err(Error::Undefined("AMOTA with zero ground-truth objects".into()));
    }
    let total_preds: usize = frames.iter().map(|f| f.preds.len()).sum();
    let prefix: Vec<MotaCounts> =
        (0..=total_preds).map(|k| count_errors(frames, k)).collect::<Result<_>>()?;

    let recalls: Vec<f64> = (1..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let mut mota = Vec::with_capacity(recalls.len());
    let mut counts = Vec::with_capacity(recalls.len());
    for &r in &recalls {
        let need = r * gt as f64 - 1e-9;
        match prefix.iter().find(|c| c.tp as f64 >= need) {
            Some(c) => {
                mota.push(c.mota(r));
                counts.push(Some(*c));
            }
            None => {
                mota.push(0.0);
                counts.push(None);
            }
        }
    }
    let amota = mota.iter().sum::<f64>() / mota.len() as f64;
    Ok(AmotaReport { amota, recalls, mota, counts })
}
