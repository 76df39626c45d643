//! Joint training objective.
//!
//! Surrogate per-task terms:
//!
//! * track / map: Hungarian-matched squared reference error (normalised by
//!   `position_scale`) plus score BCE; unmatched queries are negatives.
//! * occ: per-cell BCE against the ground-truth grid.
//! * mot: for every motion agent matched to a ground-truth agent, the squared
//!   error of its best mode (normalised by `trajectory_scale`).
//! * plan: squared waypoint error against the expert plan.
//! * moe: summed balance penalties of all routed layers.

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::types::{LossBreakdown, QuerySet, TrajectorySet};
use crate::error::{Error, Result};
use crate::geometry::OccupancyGrid;
use crate::metrics::hungarian;
use crate::numerics::{Graph, Matrix, Var};

/// Ground truth in the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Current agent centres.
    pub positions: Vec<[f64; 2]>,
    /// Future centres per agent, one entry per prediction step.
    pub futures: Vec<Vec<[f64; 2]>>,
    pub map_points: Vec<[f64; 2]>,
    /// Binary occupancy on the ego grid.
    pub occupancy: OccupancyGrid,
    pub plan: Vec<[f64; 2]>,
}

/// Tape handles consumed by [`joint_loss_vars`].
#[derive(Clone, Debug)]
pub struct LossInputs {
    /// Fused track refs, N×2 metres.
    pub track_refs: Var,
    /// Logits of the first rows of `track_refs` (the ego's own queries).
    pub track_logits: Var,
    pub map_refs: Var,
    pub map_logits: Var,
    /// `(H·W)×1` ego occupancy logits.
    pub occ_logits: Var,
    /// `(A·M)×(2T)` trajectories.
    pub traj: Var,
    pub modes: usize,
    /// Anchor of each motion agent, used to match agents to ground truth.
    pub anchors: Vec<[f64; 2]>,
    /// `1×(2·T_plan)` plan.
    pub plan: Var,
    /// Balance penalties to add, one per routed layer.
    pub moe: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub track: Var,
    pub map: Var,
    pub occ: Var,
    pub mot: Var,
    pub plan: Var,
    pub moe: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |x: Var| g.value(x).get(0, 0);
        LossBreakdown {
            track: v(self.track),
            map: v(self.map),
            occ: v(self.occ),
            mot: v(self.mot),
            plan: v(self.plan),
            moe: v(self.moe),
            total: v(self.total),
        }
    }
}

fn points_matrix(pts: &[[f64; 2]]) -> Matrix {
    Matrix::from_vec(pts.len(), 2, pts.iter().flat_map(|p| [p[0], p[1]]).collect())
        .expect("finite points")
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Mean over matched pairs of the squared, scaled error between `pred` rows
/// and `target` rows. Zero if there are no pairs.
fn matched_sq_error(
    g: &mut Graph,
    pred: Var,
    pred_rows: &[usize],
    target: Matrix,
    scale: f64,
    per_pair: f64,
) -> Result<Var> {
    if pred_rows.is_empty() {
        return Ok(g.constant(Matrix::scalar(0.0)));
    }
    let picked = g.gather_rows(pred, pred_rows)?;
    let t = g.constant(target);
    let d = g.sub(picked, t)?;
    let d = g.scale(d, 1.0 / scale);
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (pred_rows.len() as f64 * per_pair)))
}

/// Hungarian matching of reference rows against ground-truth points, then
/// squared error on matched pairs plus BCE on the first `logits` rows.
fn query_term(
    g: &mut Graph,
    refs: Var,
    logits: Var,
    gt: &[[f64; 2]],
    scale: f64,
) -> Result<Var> {
    let values = g.value(refs).clone();
    let n = values.rows();
    let n_logits = g.shape(logits).0;
    if n_logits > n {
        return Err(Error::Contract("more score rows than reference rows".into()));
    }
    let mut pairs = Vec::new();
    if n > 0 && !gt.is_empty() {
        let cost = Matrix::from_vec(
            n,
            gt.len(),
            (0..n)
                .flat_map(|i| {
                    let p = [values.get(i, 0), values.get(i, 1)];
                    gt.iter().map(move |&q| sq_dist(p, q) / (scale * scale))
                })
                .collect(),
        )?;
        pairs = hungarian(&cost, None)?.pairs;
    }
    let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let target: Vec<[f64; 2]> = pairs.iter().map(|p| gt[p.1]).collect();
    let reg = matched_sq_error(g, refs, &rows, points_matrix(&target), scale, 1.0)?;
    let mut labels = Matrix::zeros(n_logits, 1);
    for &r in rows.iter().filter(|&&r| r < n_logits) {
        labels.set(r, 0, 1.0);
    }
    let bce = g.bce_with_logits(logits, &labels)?;
    g.add(reg, bce)
}

/// Index of the best mode per agent and the agent ↔ ground-truth pairs.
fn motion_targets(
    traj: &Matrix,
    modes: usize,
    anchors: &[[f64; 2]],
    gt: &GroundTruth,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let agents = traj.rows() / modes;
    let steps = traj.cols() / 2;
    if anchors.len() != agents {
        return Err(Error::Contract(format!("{} anchors for {agents} motion agents", anchors.len())));
    }
    if agents == 0 || gt.positions.is_empty() {
        return Ok((vec![], vec![]));
    }
    let anchor = |a: usize| anchors[a];
    let cost = Matrix::from_vec(
        agents,
        gt.positions.len(),
        (0..agents)
            .flat_map(|a| gt.positions.iter().map(move |&q| sq_dist(anchor(a), q)))
            .collect(),
    )?;
    let pairs = hungarian(&cost, None)?.pairs;
    let mut rows = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (a, j) in pairs {
        let fut = &gt.futures[j];
        let mut best = (f64::INFINITY, 0);
        for m in 0..modes {
            let r = traj.row(a * modes + m);
            let e: f64 = (0..steps).map(|t| sq_dist([r[2 * t], r[2 * t + 1]], fut[t])).sum();
            if e < best.0 {
                best = (e, m);
            }
        }
        rows.push(a * modes + best.1);
        targets.push(j);
    }
    Ok((rows, targets))
}

/// Records the six loss terms and their sum.
pub fn joint_loss_vars(
    g: &mut Graph,
    inputs: &LossInputs,
    gt: &GroundTruth,
    cfg: &ModelConfig,
) -> Result<LossVars> {
    let steps = g.shape(inputs.traj).1 / 2;
    if gt.futures.len() != gt.positions.len() || gt.futures.iter().any(|f| f.len() != steps) {
        return Err(Error::Contract(format!(
            "ground truth futures must have {steps} steps per agent"
        )));
    }
    if g.shape(inputs.occ_logits) != (gt.occupancy.probs().len(), 1) {
        return Err(Error::Contract("occupancy ground truth does not match the grid".into()));
    }
    if g.shape(inputs.plan) != (1, 2 * gt.plan.len()) {
        return Err(Error::Contract("expert plan length differs from planner horizon".into()));
    }
    if inputs.modes == 0 || g.shape(inputs.traj).0 % inputs.modes != 0 {
        return Err(Error::Contract("trajectory rows are not a multiple of modes".into()));
    }

    let track = query_term(
        g,
        inputs.track_refs,
        inputs.track_logits,
        &gt.positions,
        cfg.position_scale,
    )?;
    let map = query_term(
        g,
        inputs.map_refs,
        inputs.map_logits,
        &gt.map_points,
        cfg.position_scale,
    )?;

    let occ_target = Matrix::from_vec(
        gt.occupancy.probs().len(),
        1,
        gt.occupancy.probs().to_vec(),
    )?;
    let occ = g.bce_with_logits(inputs.occ_logits, &occ_target)?;

    let (rows, targets) = motion_targets(g.value(inputs.traj), inputs.modes, &inputs.anchors, gt)?;
    let fut: Vec<Matrix> = targets
        .iter()
        .map(|&j| {
            Matrix::row_vector(&gt.futures[j].iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<_>>())
        })
        .collect();
    let fut_target = if fut.is_empty() {
        Matrix::zeros(0, 2 * steps)
    } else {
        Matrix::concat_rows(&fut.iter().collect::<Vec<_>>())?
    };
    let mot = matched_sq_error(
        g,
        inputs.traj,
        &rows,
        fut_target,
        cfg.trajectory_scale,
        steps as f64,
    )?;

    let expert = g.constant(Matrix::row_vector(
        &gt.plan.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<_>>(),
    ));
    let d = g.sub(inputs.plan, expert)?;
    let d = g.scale(d, 1.0 / cfg.trajectory_scale);
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    let plan = g.scale(s, 1.0 / gt.plan.len() as f64);

    let mut moe = g.constant(Matrix::scalar(0.0));
    for &p in &inputs.moe {
        moe = g.add(moe, p)?;
    }

    let mut total = g.add(track, map)?;
    for t in [occ, mot, plan, moe] {
        total = g.add(total, t)?;
    }
    Ok(LossVars {
        track,
        map,
        occ,
        mot,
        plan,
        moe,
        total,
    })
}

/// Decoded outputs of one ego forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    /// Fused track queries; the first `ego_tracks` rows are the ego's own.
    pub tracks: QuerySet,
    pub ego_tracks: usize,
    pub map: QuerySet,
    /// Ego occupancy probabilities before fusion.
    pub occupancy: OccupancyGrid,
    pub trajectories: TrajectorySet,
    /// Anchor of each trajectory agent.
    pub anchors: Vec<[f64; 2]>,
    pub plan: Vec<[f64; 2]>,
    pub moe_penalty: f64,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    (p / (1.0 - p)).ln()
}

/// Evaluates the joint loss on already decoded outputs. Scores are mapped
/// back to logits, so confident scores reproduce the tape value closely but
/// not bitwise.
pub fn joint_loss(outputs: &ModelOutputs, gt: &GroundTruth, cfg: &ModelConfig) -> Result<LossBreakdown> {
    if outputs.ego_tracks > outputs.tracks.len() {
        return Err(Error::Contract("ego track count exceeds fused tracks".into()));
    }
    let mut g = Graph::new();
    let col = |v: Vec<f64>| Matrix::from_vec(v.len(), 1, v).expect("finite");
    let track_refs = g.constant(outputs.tracks.refs.to_matrix());
    let track_logits = g.constant(col(outputs.tracks.scores[..outputs.ego_tracks]
        .iter()
        .map(|&p| logit(p))
        .collect()));
    let map_refs = g.constant(outputs.map.refs.to_matrix());
    let map_logits = g.constant(col(outputs.map.scores.iter().map(|&p| logit(p)).collect()));
    let occ_logits = g.constant(col(outputs.occupancy.probs().iter().map(|&p| logit(p)).collect()));
    let tr = &outputs.trajectories;
    let traj = g.constant(Matrix::from_vec(tr.agents * tr.modes, 2 * tr.steps, tr.points.clone())?);
    let plan = g.constant(Matrix::row_vector(
        &outputs.plan.iter().flat_map(|p| [p[0], p[1]]).collect::<Vec<_>>(),
    ));
    let moe = vec![g.constant(Matrix::scalar(outputs.moe_penalty))];
    let inputs = LossInputs {
        track_refs,
        track_logits,
        map_refs,
        map_logits,
        occ_logits,
        traj,
        modes: tr.modes,
        anchors: outputs.anchors.clone(),
        plan,
        moe,
    };
    let vars = joint_loss_vars(&mut g, &inputs, gt, cfg)?;
    Ok(vars.breakdown(&g))
}
