//! Multi-level fusion of another agent's messages into the ego view:
//! track, map and motion queries, and occupancy.
//!
//! Query fusion runs on a tape so the ego stack can be trained through it;
//! the other agent's inputs always enter as constants. The value-level
//! wrappers evaluate the same code on a throwaway tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OccupancyGrid, PointSet2D, RigidTransform2D};
use crate::model::{ModelConfig, QueryKind, QuerySet, QueryVars};
use crate::numerics::{AttentionBlock, Graph, Matrix, Parameterized, PerceptronBlock, Var};

/// Width of the pose feature fed next to queries and anchors.
const POSE_FEATURES: usize = 6;

/// Learned parameters of the query fusion operators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// `[Q_other, pose] → D`, aligning other track queries to the ego frame.
    pub track_align: PerceptronBlock,
    /// Shared reference-point embedding `2 → D`.
    pub pos_embed: PerceptronBlock,
    pub track_attn: AttentionBlock,
    /// `[Q_other, pose] → D` for map queries.
    pub map_align: PerceptronBlock,
    /// `[Q_ego, Q̃_other] → D`, row by row.
    pub map_fuse: PerceptronBlock,
    /// `[anchor, pose] → D`.
    pub anchor_embed: PerceptronBlock,
    /// `[Q_other, P_other] → D`.
    pub traj_embed: PerceptronBlock,
    pub traj_self: AttentionBlock,
    pub traj_cross: AttentionBlock,
    position_scale: f64,
}

impl FusionParams {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, h) = (cfg.dim, cfg.ffn_hidden);
        Ok(FusionParams {
            track_align: PerceptronBlock::new(rng, d + POSE_FEATURES, h, d),
            pos_embed: PerceptronBlock::new(rng, 2, h, d),
            track_attn: AttentionBlock::new(rng, d, cfg.heads)?,
            map_align: PerceptronBlock::new(rng, d + POSE_FEATURES, h, d),
            map_fuse: PerceptronBlock::new(rng, 2 * d, h, d),
            anchor_embed: PerceptronBlock::new(rng, 2 + POSE_FEATURES, h, d),
            traj_embed: PerceptronBlock::new(rng, 2 * d, h, d),
            traj_self: AttentionBlock::new(rng, d, cfg.heads)?,
            traj_cross: AttentionBlock::new(rng, d, cfg.heads)?,
            position_scale: cfg.position_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.pos_embed.output_dim()
    }

    pub fn position_scale(&self) -> f64 {
        self.position_scale
    }

    /// Pose row with the translation in position-scale units.
    fn pose(&self, t: &RigidTransform2D) -> Matrix {
        t.with_scaled_translation(1.0 / self.position_scale).rot_feature()
    }

    /// `[rows, pose]` with the pose repeated on every row.
    fn with_pose(&self, rows: &Matrix, t: &RigidTransform2D) -> Result<Matrix> {
        let pose = self.pose(t);
        let tiled = Matrix::concat_rows(&vec![&pose; rows.rows()])
            .unwrap_or_else(|_| Matrix::zeros(0, POSE_FEATURES));
        Matrix::concat_cols(&[rows, &tiled])
    }

    fn check(&self, qs: &QuerySet, kind: QueryKind, side: &str) -> Result<()> {
        if qs.kind != kind {
            return Err(Error::Contract(format!("{side} queries are {:?}, expected {kind:?}", qs.kind)));
        }
        if qs.dim() != self.dim() {
            return Err(Error::dim(
                "fusion",
                format!("{side} queries have width {}, model dim is {}", qs.dim(), self.dim()),
            ));
        }
        Ok(())
    }

    /// Other-agent track queries aligned to the ego frame, `N_other×D`.
    fn align_tracks<'p>(&'p self, g: &mut Graph<'p>, other: &QuerySet, t: &RigidTransform2D) -> Result<Var> {
        let x = g.constant(self.with_pose(&other.queries, t)?);
        self.track_align.forward(g, x)
    }

    /// Track fusion on a tape. Output rows are the ego queries followed by
    /// the aligned other queries, attended jointly with positional
    /// embeddings: `H + mhsa(H)` where `H = X + pos(P / scale)`. Refs are
    /// the ego refs followed by the transformed other refs; scores carry
    /// through.
    pub fn track_fusion_vars<'p>(
        &'p self,
        g: &mut Graph<'p>,
        ego: &QueryVars,
        other: &QuerySet,
        t: &RigidTransform2D,
    ) -> Result<QueryVars> {
        if ego.kind != QueryKind::Track {
            return Err(Error::Contract("ego queries must be track queries".into()));
        }
        self.check(other, QueryKind::Track, "other")?;
        if g.shape(ego.queries).1 != self.dim() {
            return Err(Error::dim("track_fusion", "ego query width differs from model dim"));
        }
        let (x, refs, scores) = if other.is_empty() {
            (ego.queries, ego.refs, ego.scores)
        } else {
            let aligned = self.align_tracks(g, other, t)?;
            let x = g.concat_rows(&[ego.queries, aligned])?;
            let orefs = g.constant(t.apply(&other.refs).to_matrix());
            let refs = g.concat_rows(&[ego.refs, orefs])?;
            let osc = g.constant(score_column(&other.scores));
            let scores = g.concat_rows(&[ego.scores, osc])?;
            (x, refs, scores)
        };
        if g.shape(x).0 == 0 {
            return Ok(QueryVars { kind: QueryKind::Track, agent: ego.agent, queries: x, refs, scores });
        }
        let scaled = g.scale(refs, 1.0 / self.position_scale);
        let pos = self.pos_embed.forward(g, scaled)?;
        let h = g.add(x, pos)?;
        let a = self.track_attn.self_attend(g, h)?;
        let queries = g.add(h, a)?;
        Ok(QueryVars { kind: QueryKind::Track, agent: ego.agent, queries, refs, scores })
    }

    /// Map fusion on a tape: `map_fuse([Q_ego, Q̃_other])` row by row, pairing
    /// by index. An empty other side contributes zero rows of `Q̃_other`.
    pub fn map_fusion_vars<'p>(
        &'p self,
        g: &mut Graph<'p>,
        ego: Var,
        other: &QuerySet,
        t: &RigidTransform2D,
    ) -> Result<Var> {
        self.check(other, QueryKind::Map, "other")?;
        let (n, d) = g.shape(ego);
        if d != self.dim() {
            return Err(Error::dim("map_fusion", "ego query width differs from model dim"));
        }
        let aligned = if other.is_empty() {
            g.constant(Matrix::zeros(n, d))
        } else if other.len() != n {
            return Err(Error::Contract(format!(
                "map fusion pairs queries by index: {n} ego vs {} other",
                other.len()
            )));
        } else {
            let x = g.constant(self.with_pose(&other.queries, t)?);
            self.map_align.forward(g, x)?
        };
        let cat = g.concat_cols(&[ego, aligned])?;
        self.map_fuse.forward(g, cat)
    }

    /// Motion fusion on a tape. Other mode queries get an anchor embedding
    /// from `[anchor / scale, pose]` and are projected with it; the stacked
    /// `F = [Q_ego; Q̃_other]` goes through `S = F + mhsa(F)` and
    /// `S + mhca(S, Q_A)`.
    pub fn traj_fusion_vars<'p>(
        &'p self,
        g: &mut Graph<'p>,
        ego: Var,
        other: &QuerySet,
        fused_tracks: Var,
        t: &RigidTransform2D,
    ) -> Result<Var> {
        self.check(other, QueryKind::Motion, "other")?;
        if g.shape(ego).1 != self.dim() || g.shape(fused_tracks).1 != self.dim() {
            return Err(Error::dim("traj_fusion", "query width differs from model dim"));
        }
        if g.shape(fused_tracks).0 == 0 {
            return Err(Error::Contract("trajectory fusion needs fused track queries".into()));
        }
        let f = if other.is_empty() {
            ego
        } else {
            let anchors = other.refs.to_matrix().scale(1.0 / self.position_scale);
            let x = g.constant(self.with_pose(&anchors, t)?);
            let p = self.anchor_embed.forward(g, x)?;
            let q = g.constant(other.queries.clone());
            let cat = g.concat_cols(&[q, p])?;
            let embedded = self.traj_embed.forward(g, cat)?;
            g.concat_rows(&[ego, embedded])?
        };
        if g.shape(f).0 == 0 {
            return Ok(f);
        }
        let s = self.traj_self.self_attend(g, f)?;
        let s = g.add(f, s)?;
        let c = self.traj_cross.attend(g, s, fused_tracks)?;
        g.add(s, c)
    }
}

fn score_column(scores: &[f64]) -> Matrix {
    Matrix::from_vec(scores.len(), 1, scores.to_vec()).expect("score column")
}

impl Parameterized for FusionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.track_align.visit(f);
        self.pos_embed.visit(f);
        self.track_attn.visit(f);
        self.map_align.visit(f);
        self.map_fuse.visit(f);
        self.anchor_embed.visit(f);
        self.traj_embed.visit(f);
        self.traj_self.visit(f);
        self.traj_cross.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.track_align.visit_mut(f);
        self.pos_embed.visit_mut(f);
        self.track_attn.visit_mut(f);
        self.map_align.visit_mut(f);
        self.map_fuse.visit_mut(f);
        self.anchor_embed.visit_mut(f);
        self.traj_embed.visit_mut(f);
        self.traj_self.visit_mut(f);
        self.traj_cross.visit_mut(f);
    }
}

/// Fuses other-agent track queries into the ego set. `t` maps the other
/// agent's frame to the ego frame.
pub fn track_fusion(
    params: &FusionParams,
    ego: &QuerySet,
    other: &QuerySet,
    t: &RigidTransform2D,
) -> Result<QuerySet> {
    params.check(ego, QueryKind::Track, "ego")?;
    let mut g = Graph::new();
    let ev = QueryVars::constant(&mut g, ego);
    let out = params.track_fusion_vars(&mut g, &ev, other, t)?;
    out.value(&g)
}

/// Fuses paired map queries. Refs and scores of the ego set carry through.
pub fn map_fusion(
    params: &FusionParams,
    ego: &QuerySet,
    other: &QuerySet,
    t: &RigidTransform2D,
) -> Result<QuerySet> {
    params.check(ego, QueryKind::Map, "ego")?;
    let mut g = Graph::new();
    let e = g.constant(ego.queries.clone());
    let out = params.map_fusion_vars(&mut g, e, other, t)?;
    QuerySet::new(QueryKind::Map, ego.agent, g.value(out).clone(), ego.refs.clone(), ego.scores.clone())
}

/// Fuses other-agent motion queries, conditioned on the fused track queries
/// `q_a`. Output refs are the ego anchors followed by the transformed other
/// anchors; scores carry through.
pub fn traj_fusion(
    params: &FusionParams,
    ego: &QuerySet,
    other: &QuerySet,
    q_a: &QuerySet,
    t: &RigidTransform2D,
) -> Result<QuerySet> {
    params.check(ego, QueryKind::Motion, "ego")?;
    params.check(q_a, QueryKind::Track, "fused track")?;
    let mut g = Graph::new();
    let e = g.constant(ego.queries.clone());
    let qa = g.constant(q_a.queries.clone());
    let out = params.traj_fusion_vars(&mut g, e, other, qa, t)?;
    let mut refs = ego.refs.points.clone();
    refs.extend(t.apply(&other.refs).points);
    let mut scores = ego.scores.clone();
    scores.extend(&other.scores);
    QuerySet::new(QueryKind::Motion, ego.agent, g.value(out).clone(), PointSet2D::new(refs)?, scores)
}

/// Other grid resampled onto the ego grid by nearest cell: each ego cell
/// reads the other cell containing its centre, or 0 outside the other grid.
pub fn resample(ego: &OccupancyGrid, other: &OccupancyGrid, t: &RigidTransform2D) -> Result<OccupancyGrid> {
    // grids arriving over the wire carry f32-rounded geometry
    let (a, b) = (ego.cell_size(), other.cell_size());
    if (a - b).abs() > 1e-6 * a.max(b) {
        return Err(Error::dim(
            "occ_fusion",
            format!("cell sizes {} and {} differ", ego.cell_size(), other.cell_size()),
        ));
    }
    let back = t.inverse();
    let mut out = OccupancyGrid::new(ego.height(), ego.width(), ego.cell_size(), ego.origin())?;
    for r in 0..ego.height() {
        for c in 0..ego.width() {
            let p = back.apply_point(ego.cell_center(r, c));
            if let Some((ro, co)) = other.cell_of(p) {
                out.set(r, c, other.get(ro, co));
            }
        }
    }
    Ok(out)
}

/// Cell-wise maximum of the ego grid and the resampled other grid.
pub fn occ_fusion(ego: &OccupancyGrid, other: &OccupancyGrid, t: &RigidTransform2D) -> Result<OccupancyGrid> {
    let aligned = resample(ego, other, t)?;
    let probs = ego.probs().iter().zip(aligned.probs()).map(|(&a, &b)| a.max(b)).collect();
    OccupancyGrid::from_probs(ego.height(), ego.width(), ego.cell_size(), ego.origin(), probs)
}

/// Fused probabilities and the binary map `P > τ`.
pub fn occ_fusion_binary(
    ego: &OccupancyGrid,
    other: &OccupancyGrid,
    t: &RigidTransform2D,
    tau: f64,
) -> Result<(OccupancyGrid, OccupancyGrid)> {
    let fused = occ_fusion(ego, other, t)?;
    let binary = fused.threshold(tau);
    Ok((fused, binary))
}
