use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{Party, Scenario, AGENT_EXTENT};
use crate::comm::{bps, constrain, encode_occupancy, encode_queries, ChannelBudget, Payload, V2XMessage};
use crate::error::{Error, Result};
use crate::fusion::{occ_fusion_binary, FusionParams};
use crate::geometry::{OccupancyGrid, PerceptionRange};
use crate::metrics::{
    amota, grid_iou, hungarian, map_score, motion_errors, planning_errors, rasterize_points, Detection,
    MatchCriterion, MetricsReport, TrackFrame, EGO_EXTENT, FAR_RANGE_M, MISS_THRESHOLD_M, NEAR_RANGE_M,
};
use crate::model::{
    joint_loss_vars, occupancy_from_probs, waypoints, AgentModel, LossBreakdown, LossInputs, LossVars,
    ModelConfig, ModelOutputs, MoeRecord, MotionOutputs, Planner, QueryKind, QuerySet, QueryVars,
    TrajectorySet,
};
use crate::numerics::{Graph, Matrix, Parameterized, Var};

pub const EGO_AGENT: u32 = 0;
pub const INFRA_AGENT: u32 = 1;
/// Timestamp stamped on every message of a single-frame episode.
pub const FRAME_TIMESTAMP_MS: u64 = 0;
/// Fused tracks at or above this score are reported as detections.
pub const DETECTION_SCORE: f64 = 0.25;
/// Centre-distance thresholds of the detection mAP, metres.
pub const DETECTION_THRESHOLDS_M: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Recall points of the AMOTA sweep.
pub const AMOTA_POINTS: usize = 41;
pub const MAP_CLASS: &str = "lane";

/// The four ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Toggles {
    /// Send and fuse track, map and occupancy content.
    pub perception_fusion: bool,
    /// Send and fuse motion queries.
    pub prediction_fusion: bool,
    pub moe_encoder: bool,
    pub moe_decoder: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::from_bits(0b1111)
    }
}

impl Toggles {
    /// Bits from most to least significant: P-level, M-level, encoder, decoder.
    pub fn from_bits(b: u8) -> Self {
        Toggles {
            perception_fusion: b & 8 != 0,
            prediction_fusion: b & 4 != 0,
            moe_encoder: b & 2 != 0,
            moe_decoder: b & 1 != 0,
        }
    }

    /// All sixteen combinations, fusion-off and dense first.
    pub fn grid() -> Vec<Toggles> {
        (0..16).map(Toggles::from_bits).collect()
    }

    pub fn any_fusion(&self) -> bool {
        self.perception_fusion || self.prediction_fusion
    }
}

/// Everything a pipeline run depends on besides parameters and the scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub toggles: Toggles,
    /// Model shape; its MoE flags are overridden by `toggles`.
    pub model: ModelConfig,
    pub budget: ChannelBudget,
    pub seed: u64,
    /// Scenes per batch; scene `i` uses seed `seed + i`.
    pub scenarios: usize,
    pub difficulty: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            toggles: Toggles::default(),
            model: ModelConfig::default(),
            budget: ChannelBudget::unlimited(),
            seed: 0,
            scenarios: 4,
            difficulty: 0.5,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.budget.validate()?;
        if self.scenarios == 0 {
            return Err(Error::Config("scenario batch must not be empty".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Config(format!("difficulty {} outside [0, 1]", self.difficulty)));
        }
        Ok(())
    }

    /// The model configuration with the MoE toggles applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            moe_encoder: self.toggles.moe_encoder,
            moe_decoder: self.toggles.moe_decoder,
            ..self.model.clone()
        }
    }

    pub fn scenario_seeds(&self) -> Vec<u64> {
        (0..self.scenarios as u64).map(|i| self.seed.wrapping_add(i)).collect()
    }
}

/// Trainable ego-side parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoStack {
    pub agent: AgentModel,
    pub fusion: FusionParams,
    pub planner: Planner,
}

impl Parameterized for EgoStack {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.agent.visit(f);
        self.fusion.visit(f);
        self.planner.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.agent.visit_mut(f);
        self.fusion.visit_mut(f);
        self.planner.visit_mut(f);
    }
}

/// Ego stack plus the roadside unit's perception and motion model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub ego: EgoStack,
    pub infra: AgentModel,
}

impl ModelParams {
    pub fn new(seed: u64, cfg: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ego = EgoStack {
            agent: AgentModel::new(&mut rng, cfg)?,
            fusion: FusionParams::new(&mut rng, cfg)?,
            planner: Planner::new(&mut rng, cfg)?,
        };
        let infra = AgentModel::new(&mut rng, cfg)?;
        Ok(ModelParams { ego, infra })
    }

    /// Errors unless both agents were built for `cfg`'s width and MoE flags.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        for m in [&self.ego.agent, &self.infra] {
            let enc = m.encoder.iter().all(|l| l.ffn.moe().is_some() == cfg.moe_encoder);
            let dec = m.motion.layers.iter().all(|l| l.ffn.moe().is_some() == cfg.moe_decoder);
            if m.dim() != cfg.dim || !enc || !dec {
                return Err(Error::Config("parameters were built for a different model configuration".into()));
            }
        }
        Ok(())
    }
}

/// Decoded other-agent content as seen by the ego. Absent content is an
/// empty set of the right kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Received {
    pub tracks: QuerySet,
    pub map: QuerySet,
    pub motion: QuerySet,
    pub occupancy: Option<OccupancyGrid>,
}

impl Received {
    pub fn none(dim: usize) -> Self {
        Received {
            tracks: QuerySet::empty(QueryKind::Track, INFRA_AGENT, dim),
            map: QuerySet::empty(QueryKind::Map, INFRA_AGENT, dim),
            motion: QuerySet::empty(QueryKind::Motion, INFRA_AGENT, dim),
            occupancy: None,
        }
    }

    /// Decodes delivered messages. A 0×0 grid counts as no grid.
    pub fn from_messages(msgs: &[V2XMessage], dim: usize) -> Result<Self> {
        let mut rx = Received::none(dim);
        let mut seen = Vec::new();
        for m in msgs {
            if seen.contains(&m.kind) {
                return Err(Error::Contract(format!("duplicate {:?} message in one frame", m.kind)));
            }
            seen.push(m.kind);
            match m.decode()? {
                Payload::Occupancy(g) => rx.occupancy = (!g.probs().is_empty()).then_some(g),
                Payload::Queries(q) => {
                    if !q.is_empty() && q.dim() != dim {
                        return Err(Error::dim("receive", "query width differs from model dim"));
                    }
                    let q = if q.is_empty() { QuerySet::empty(q.kind, q.agent, dim) } else { q };
                    match q.kind {
                        QueryKind::Track => rx.tracks = q,
                        QueryKind::Map => rx.map = q,
                        QueryKind::Motion => rx.motion = q,
                    }
                }
            }
        }
        Ok(rx)
    }
}

/// The roadside unit's messages for one frame: track, map and occupancy
/// with perception fusion on, motion with prediction fusion on.
pub fn infra_messages(scn: &Scenario, toggles: &Toggles, infra: &AgentModel, cfg: &ModelConfig) -> Result<Vec<V2XMessage>> {
    if !toggles.any_fusion() {
        return Ok(Vec::new());
    }
    let range = PerceptionRange::INFRASTRUCTURE;
    let mut g = Graph::new();
    let ctx = g.constant(scn.sensor_tokens(Party::Infrastructure, cfg.dim));
    let mut records = Vec::new();
    let perc = infra.perceive(&mut g, INFRA_AGENT, ctx, &range, &mut records)?;
    let mut msgs = Vec::new();
    if toggles.perception_fusion {
        let tracks = perc.heads.track.set.value(&g)?;
        let map = perc.heads.map.set.value(&g)?;
        let probs = g.sigmoid(perc.heads.occ_logits);
        let occ = occupancy_from_probs(g.value(probs), cfg.bev_height, cfg.bev_width, &range)?;
        msgs.push(encode_queries(&tracks, FRAME_TIMESTAMP_MS)?);
        msgs.push(encode_queries(&map, FRAME_TIMESTAMP_MS)?);
        msgs.push(encode_occupancy(&occ, INFRA_AGENT, FRAME_TIMESTAMP_MS)?);
    }
    if toggles.prediction_fusion {
        let tracks = perc.heads.track.set.value(&g)?;
        let sel = select_rows(&mut g, &perc.heads.track.set, &tracks.top_by_score(cfg.n_motion))?;
        let motion = infra.motion.forward(&mut g, &sel, perc.bev, &mut records)?;
        msgs.push(encode_queries(&motion.set.value(&g)?, FRAME_TIMESTAMP_MS)?);
    }
    Ok(msgs)
}

/// Indices of the `n` highest scores, ties by index.
fn top_rows(scores: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

fn select_rows(g: &mut Graph, q: &QueryVars, idx: &[usize]) -> Result<QueryVars> {
    Ok(QueryVars {
        kind: q.kind,
        agent: q.agent,
        queries: g.gather_rows(q.queries, idx)?,
        refs: g.gather_rows(q.refs, idx)?,
        scores: g.gather_rows(q.scores, idx)?,
    })
}

/// Tape handles of one ego forward pass.
pub struct EgoTape<'p> {
    pub loss: LossVars,
    pub records: Vec<MoeRecord<'p>>,
    pub tracks: QueryVars,
    pub ego_tracks: usize,
    pub map: QueryVars,
    pub occ_probs: Var,
    pub motion: MotionOutputs,
    /// Anchor of each trajectory agent.
    pub anchors: Vec<[f64; 2]>,
    pub plan: Var,
}

/// Ego perception, fusion with `rx`, motion, planning and the joint loss,
/// recorded on `g`. Fusion always runs; empty inputs take its no-op paths.
pub fn ego_forward<'p>(
    g: &mut Graph<'p>,
    ego: &'p EgoStack,
    scn: &Scenario,
    rx: &Received,
    cfg: &ModelConfig,
) -> Result<EgoTape<'p>> {
    let range = PerceptionRange::EGO;
    let t = scn.infra_to_ego();
    let mut records = Vec::new();
    let ctx = g.constant(scn.sensor_tokens(Party::Ego, cfg.dim));
    let perc = ego.agent.perceive(g, EGO_AGENT, ctx, &range, &mut records)?;

    let tracks = ego.fusion.track_fusion_vars(g, &perc.heads.track.set, &rx.tracks, &t)?;
    let mq = ego.fusion.map_fusion_vars(g, perc.heads.map.set.queries, &rx.map, &t)?;
    let map = ego.agent.heads.map.decode(g, QueryKind::Map, EGO_AGENT, mq, &range)?;

    let picked = top_rows(g.value(tracks.scores).data(), cfg.n_motion);
    let sel = select_rows(g, &tracks, &picked)?;
    let own = ego.agent.motion.forward(g, &sel, perc.bev, &mut records)?;
    let fused = ego.fusion.traj_fusion_vars(g, own.set.queries, &rx.motion, tracks.queries, &t)?;
    let anchors = if rx.motion.is_empty() {
        own.set.refs
    } else {
        let other = g.constant(t.apply(&rx.motion.refs).to_matrix());
        g.concat_rows(&[own.set.refs, other])?
    };
    let motion = ego.agent.motion.decode(g, EGO_AGENT, fused, anchors)?;
    let plan = ego.planner.forward(g, fused, scn.ego_velocity)?;

    let modes = ego.agent.motion.modes();
    let anchor_rows = g.value(anchors);
    let agent_anchors: Vec<[f64; 2]> = (0..anchor_rows.rows() / modes)
        .map(|a| [anchor_rows.get(a * modes, 0), anchor_rows.get(a * modes, 1)])
        .collect();
    let moe = records.iter().map(|r| r.penalty(g)).collect::<Result<Vec<_>>>()?;
    let inputs = LossInputs {
        track_refs: tracks.refs,
        track_logits: perc.heads.track.logits,
        map_refs: map.set.refs,
        map_logits: map.logits,
        occ_logits: perc.heads.occ_logits,
        traj: motion.traj,
        modes,
        anchors: agent_anchors.clone(),
        plan,
        moe,
    };
    let loss = joint_loss_vars(g, &inputs, &scn.ground_truth(), cfg)?;
    let occ_probs = g.sigmoid(perc.heads.occ_logits);
    Ok(EgoTape {
        loss,
        records,
        ego_tracks: g.shape(perc.heads.track.logits).0,
        tracks,
        map: map.set,
        occ_probs,
        motion,
        anchors: agent_anchors,
        plan,
    })
}

impl EgoTape<'_> {
    pub fn outputs(&self, g: &Graph, cfg: &ModelConfig) -> Result<ModelOutputs> {
        Ok(ModelOutputs {
            tracks: self.tracks.value(g)?,
            ego_tracks: self.ego_tracks,
            map: self.map.value(g)?,
            occupancy: occupancy_from_probs(g.value(self.occ_probs), cfg.bev_height, cfg.bev_width, &PerceptionRange::EGO)?,
            trajectories: TrajectorySet::from_matrices(cfg.modes, g.value(self.motion.traj), g.value(self.motion.mode_probs))?,
            anchors: self.anchors.clone(),
            plan: waypoints(g.value(self.plan)),
            moe_penalty: g.value(self.loss.moe).get(0, 0),
        })
    }
}

/// Result of one cooperative frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub outputs: ModelOutputs,
    /// Binary occupancy after fusion and thresholding.
    pub occupancy: OccupancyGrid,
    pub report: MetricsReport,
    pub loss: LossBreakdown,
    /// Kinds of the messages delivered over the channel, in order.
    pub delivered: Vec<crate::comm::PayloadKind>,
}

/// Wall-clock milliseconds spent in each stage of a frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    /// Roadside forward pass and message encoding.
    pub infra_ms: f64,
    /// Budget fitting and decoding.
    pub channel_ms: f64,
    /// Ego forward pass with fusion, heads and loss.
    pub ego_ms: f64,
    pub metrics_ms: f64,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Full cooperative frame: roadside perception, encode, channel budget,
/// decode, ego fusion, motion, planning, loss and metrics.
pub fn run_pipeline(scn: &Scenario, cfg: &RunConfig, params: &ModelParams) -> Result<PipelineRun> {
    Ok(run_pipeline_timed(scn, cfg, params)?.0)
}

/// [`run_pipeline`] with per-stage wall-clock times.
pub fn run_pipeline_timed(scn: &Scenario, cfg: &RunConfig, params: &ModelParams) -> Result<(PipelineRun, StageTimings)> {
    cfg.validate()?;
    let mc = cfg.model_config();
    params.check(&mc)?;
    let mut times = StageTimings::default();
    let t = Instant::now();
    let sent = infra_messages(scn, &cfg.toggles, &params.infra, &mc)?;
    times.infra_ms = ms_since(t);
    let t = Instant::now();
    let delivered = constrain(&sent, &cfg.budget)?;
    let rx = Received::from_messages(&delivered, mc.dim)?;
    let rate = bps(&delivered, cfg.budget.frequency_hz)?;
    times.channel_ms = ms_since(t);
    let t = Instant::now();
    let (outputs, occupancy, loss) = ego_frame(scn, &mc, &params.ego, &rx)?;
    times.ego_ms = ms_since(t);
    let t = Instant::now();
    let report = evaluate(scn, &outputs, &occupancy, rate)?;
    times.metrics_ms = ms_since(t);
    let delivered = delivered.iter().map(|m| m.kind).collect();
    Ok((PipelineRun { outputs, occupancy, report, loss, delivered }, times))
}

/// The single-agent baseline: no messages are ever built.
pub fn run_single_agent(scn: &Scenario, cfg: &RunConfig, params: &ModelParams) -> Result<PipelineRun> {
    cfg.validate()?;
    let mc = cfg.model_config();
    params.check(&mc)?;
    run_received(scn, &mc, &params.ego, &Received::none(mc.dim), 0.0)
}

/// Ego side of a frame given already decoded other-agent content.
pub fn run_received(scn: &Scenario, cfg: &ModelConfig, ego: &EgoStack, rx: &Received, rate: f64) -> Result<PipelineRun> {
    let (outputs, occupancy, loss) = ego_frame(scn, cfg, ego, rx)?;
    let report = evaluate(scn, &outputs, &occupancy, rate)?;
    Ok(PipelineRun { outputs, occupancy, report, loss, delivered: Vec::new() })
}

fn ego_frame(
    scn: &Scenario,
    cfg: &ModelConfig,
    ego: &EgoStack,
    rx: &Received,
) -> Result<(ModelOutputs, OccupancyGrid, LossBreakdown)> {
    scn.validate()?;
    let mut g = Graph::new();
    let tape = ego_forward(&mut g, ego, scn, rx, cfg)?;
    let loss = tape.loss.breakdown(&g);
    if !loss.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite joint loss {}", loss.total)));
    }
    let outputs = tape.outputs(&g, cfg)?;
    let occupancy = match &rx.occupancy {
        Some(other) => occ_fusion_binary(&outputs.occupancy, other, &scn.infra_to_ego(), cfg.occ_threshold)?.1,
        None => outputs.occupancy.threshold(cfg.occ_threshold),
    };
    Ok((outputs, occupancy, loss))
}

/// Fused tracks at or above [`DETECTION_SCORE`] as boxes of the synthetic
/// vehicle size; track ids are row indices.
pub fn detections(outputs: &ModelOutputs) -> Result<Vec<Detection>> {
    let t = &outputs.tracks;
    let mut out = Vec::new();
    for (i, (&p, &s)) in t.refs.points.iter().zip(&t.scores).enumerate() {
        if s >= DETECTION_SCORE {
            out.push(Detection::new(p, AGENT_EXTENT, 0.0, s)?.with_track(i as u64));
        }
    }
    Ok(out)
}

/// Metrics of one frame against the scene's ground truth.
pub fn evaluate(scn: &Scenario, outputs: &ModelOutputs, occupancy: &OccupancyGrid, rate: f64) -> Result<MetricsReport> {
    let preds = detections(outputs)?;
    let gts: Vec<Detection> = scn.agents.iter().map(|a| a.detection()).collect();
    let mean_ap = map_score(&preds, &gts, MatchCriterion::CenterDistance, &DETECTION_THRESHOLDS_M)?;
    let amota_v = if gts.is_empty() {
        0.0
    } else {
        amota(&[TrackFrame { preds: preds.clone(), gts: gts.clone() }], AMOTA_POINTS)?.amota
    };

    let full = 2.0 * PerceptionRange::EGO.half_extent()[0];
    let map_pred = rasterize_points(occupancy, &outputs.map.refs.points);
    let map_gt = rasterize_points(occupancy, &scn.map_points);
    let map_iou = BTreeMap::from([(MAP_CLASS.to_string(), grid_iou(&map_pred, &map_gt, full)?)]);

    let (min_ade, min_fde, miss_rate) = match motion_report(scn, &outputs.trajectories, &outputs.anchors)? {
        Some(m) => (Some(m.min_ade), Some(m.min_fde), Some(m.miss_rate)),
        None => (None, None, None),
    };

    let steps = scn.expert_plan.len();
    let obstacles: Vec<Vec<Detection>> = (0..steps)
        .map(|t| scn.agents.iter().map(|a| a.detection_at(t)).collect())
        .collect();
    let plan = planning_errors(&outputs.plan, &scn.expert_plan, &obstacles, EGO_EXTENT)?;

    let report = MetricsReport {
        mean_ap,
        amota: amota_v,
        map_iou,
        occ_iou_near: grid_iou(occupancy, &scn.occupancy, NEAR_RANGE_M)?,
        occ_iou_far: grid_iou(occupancy, &scn.occupancy, FAR_RANGE_M)?,
        min_ade,
        min_fde,
        miss_rate,
        l2: plan.l2,
        l2_avg: plan.l2_avg,
        collision: plan.collision,
        collision_avg: plan.collision_avg,
        bps: rate,
    };
    report.validate()?;
    Ok(report)
}

/// Each ground-truth agent takes the forecast whose anchor is nearest under
/// a one-to-one assignment; `None` when either side is empty.
fn motion_report(
    scn: &Scenario,
    traj: &TrajectorySet,
    anchors: &[[f64; 2]],
) -> Result<Option<crate::metrics::MotionErrors>> {
    if traj.agents == 0 || scn.agents.is_empty() {
        return Ok(None);
    }
    let cost = Matrix::from_vec(
        anchors.len(),
        scn.agents.len(),
        anchors
            .iter()
            .flat_map(|a| scn.agents.iter().map(move |g| (a[0] - g.center[0]).hypot(a[1] - g.center[1])))
            .collect(),
    )?;
    let pairs = hungarian(&cost, None)?.pairs;
    let per_agent = traj.modes * traj.steps * 2;
    let mut points = Vec::with_capacity(pairs.len() * per_agent);
    let mut scores = Vec::with_capacity(pairs.len() * traj.modes);
    let mut futures = Vec::with_capacity(pairs.len());
    for &(a, j) in &pairs {
        points.extend_from_slice(&traj.points[a * per_agent..(a + 1) * per_agent]);
        scores.extend_from_slice(traj.mode_scores(a));
        futures.push(scn.agents[j].future[..traj.steps].to_vec());
    }
    let subset = TrajectorySet::new(pairs.len(), traj.modes, traj.steps, points, scores)?;
    motion_errors(&subset, &futures, MISS_THRESHOLD_M).map(Some)
}
