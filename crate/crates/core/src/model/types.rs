use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointSet2D;
use crate::numerics::{Graph, Matrix, Var};

/// BEV token grid of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevState {
    pub height: usize,
    pub width: usize,
    pub cell_size: f64,
    pub tokens: Matrix,
}

impl BevState {
    pub fn new(height: usize, width: usize, cell_size: f64, tokens: Matrix) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::Contract("BEV grid must be at least 2x2".into()));
        }
        if tokens.rows() != height * width {
            return Err(Error::dim(
                "BevState",
                format!("{} tokens for a {height}x{width} grid", tokens.rows()),
            ));
        }
        Ok(BevState {
            height,
            width,
            cell_size,
            tokens,
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Track,
    Map,
    Motion,
}

/// Agent-owned feature queries with one reference point and score each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub kind: QueryKind,
    pub agent: u32,
    pub queries: Matrix,
    pub refs: PointSet2D,
    pub scores: Vec<f64>,
}

impl QuerySet {
    pub fn new(
        kind: QueryKind,
        agent: u32,
        queries: Matrix,
        refs: PointSet2D,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let n = queries.rows();
        if refs.len() != n || scores.len() != n {
            return Err(Error::dim(
                "QuerySet",
                format!("{n} queries, {} refs, {} scores", refs.len(), scores.len()),
            ));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Contract("query scores must lie in [0, 1]".into()));
        }
        Ok(QuerySet {
            kind,
            agent,
            queries,
            refs,
            scores,
        })
    }

    pub fn empty(kind: QueryKind, agent: u32, dim: usize) -> Self {
        QuerySet {
            kind,
            agent,
            queries: Matrix::zeros(0, dim),
            refs: PointSet2D::default(),
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.queries.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    /// Rows `idx`, in the given order.
    pub fn select(&self, idx: &[usize]) -> Result<QuerySet> {
        Ok(QuerySet {
            kind: self.kind,
            agent: self.agent,
            queries: self.queries.gather_rows(idx)?,
            refs: PointSet2D {
                points: idx.iter().map(|&i| self.refs.points[i]).collect(),
            },
            scores: idx.iter().map(|&i| self.scores[i]).collect(),
        })
    }

    /// Row indices of the `n` best scores (descending, ties by index).
    pub fn top_by_score(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order.truncate(n);
        order
    }
}

/// Query set recorded on a tape: `queries` N×D, `refs` N×2 in metres,
/// `scores` N×1 in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct QueryVars {
    pub kind: QueryKind,
    pub agent: u32,
    pub queries: Var,
    pub refs: Var,
    pub scores: Var,
}

impl QueryVars {
    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.queries).0
    }

    pub fn constant(g: &mut Graph, qs: &QuerySet) -> QueryVars {
        QueryVars {
            kind: qs.kind,
            agent: qs.agent,
            queries: g.constant(qs.queries.clone()),
            refs: g.constant(qs.refs.to_matrix()),
            scores: g.constant(
                Matrix::from_vec(qs.len(), 1, qs.scores.clone()).expect("score column"),
            ),
        }
    }

    /// Current values; errors if a reference point is not finite.
    pub fn value(&self, g: &Graph) -> Result<QuerySet> {
        Ok(QuerySet {
            kind: self.kind,
            agent: self.agent,
            queries: g.value(self.queries).clone(),
            refs: PointSet2D::from_matrix(g.value(self.refs))?,
            scores: g.value(self.scores).data().to_vec(),
        })
    }
}

/// Multi-modal trajectories: `agents × modes × steps` points plus per-mode
/// scores that sum to one per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub agents: usize,
    pub modes: usize,
    pub steps: usize,
    /// Row-major `[agent][mode][step][xy]`.
    pub points: Vec<f64>,
    /// Row-major `[agent][mode]`.
    pub scores: Vec<f64>,
}

impl TrajectorySet {
    pub fn new(
        agents: usize,
        modes: usize,
        steps: usize,
        points: Vec<f64>,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if points.len() != agents * modes * steps * 2 || scores.len() != agents * modes {
            return Err(Error::dim("TrajectorySet", "buffer lengths disagree with shape"));
        }
        if points.iter().chain(&scores).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite trajectory".into()));
        }
        Ok(TrajectorySet {
            agents,
            modes,
            steps,
            points,
            scores,
        })
    }

    pub fn empty(modes: usize, steps: usize) -> Self {
        TrajectorySet {
            agents: 0,
            modes,
            steps,
            points: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn point(&self, agent: usize, mode: usize, step: usize) -> [f64; 2] {
        let i = ((agent * self.modes + mode) * self.steps + step) * 2;
        [self.points[i], self.points[i + 1]]
    }

    pub fn mode(&self, agent: usize, mode: usize) -> Vec<[f64; 2]> {
        (0..self.steps).map(|t| self.point(agent, mode, t)).collect()
    }

    pub fn mode_scores(&self, agent: usize) -> &[f64] {
        &self.scores[agent * self.modes..(agent + 1) * self.modes]
    }

    /// Builds from an `(A·M)×(2T)` matrix of points and an `A×M` score matrix.
    pub fn from_matrices(modes: usize, points: &Matrix, scores: &Matrix) -> Result<Self> {
        if modes == 0 || points.rows() % modes != 0 || points.cols() % 2 != 0 {
            return Err(Error::dim("TrajectorySet", "points matrix shape"));
        }
        let agents = points.rows() / modes;
        Self::new(
            agents,
            modes,
            points.cols() / 2,
            points.data().to_vec(),
            scores.data().to_vec(),
        )
    }
}

/// The six joint-loss terms and their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub track: f64,
    pub map: f64,
    pub occ: f64,
    pub mot: f64,
    pub plan: f64,
    pub moe: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(track: f64, map: f64, occ: f64, mot: f64, plan: f64, moe: f64) -> Self {
        LossBreakdown {
            track,
            map,
            occ,
            mot,
            plan,
            moe,
            total: track + map + occ + mot + plan + moe,
        }
    }

    pub fn terms(&self) -> [f64; 6] {
        [self.track, self.map, self.occ, self.mot, self.plan, self.moe]
    }
}
