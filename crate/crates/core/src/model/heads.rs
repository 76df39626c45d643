use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::types::{BevState, QueryKind, QuerySet, QueryVars};
use crate::error::{Error, Result};
use crate::geometry::{OccupancyGrid, PerceptionRange};
use crate::numerics::{embedding, AttentionBlock, Graph, Linear, Matrix, Parameterized, Var};

/// Learnable queries that read the BEV grid, plus linear decoders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHead {
    pub embed: Matrix,
    pub attn: AttentionBlock,
    pub refs: Linear,
    pub score: Linear,
}

/// Tape handles of a decoded query set; `logits` are the pre-sigmoid scores.
#[derive(Clone, Copy, Debug)]
pub struct DecodedQueries {
    pub set: QueryVars,
    pub logits: Var,
}

impl QueryHead {
    pub fn new<R: Rng>(rng: &mut R, n: usize, cfg: &ModelConfig) -> Result<Self> {
        Ok(QueryHead {
            embed: embedding(rng, n, cfg.dim),
            attn: AttentionBlock::new(rng, cfg.dim, cfg.heads)?,
            refs: Linear::new(rng, cfg.dim, 2),
            score: Linear::new(rng, cfg.dim, 1),
        })
    }

    pub fn count(&self) -> usize {
        self.embed.rows()
    }

    /// Query features: `E + mhca(E, bev)`.
    pub fn attend<'p>(&'p self, g: &mut Graph<'p>, bev: Var) -> Result<Var> {
        let e = g.param(&self.embed);
        let a = self.attn.attend(g, e, bev)?;
        g.add(e, a)
    }

    /// Reference points `center + half·tanh(q·W + b)` (always inside
    /// `range`) and sigmoid scores.
    pub fn decode<'p>(
        &'p self,
        g: &mut Graph<'p>,
        kind: QueryKind,
        agent: u32,
        queries: Var,
        range: &PerceptionRange,
    ) -> Result<DecodedQueries> {
        let raw = self.refs.forward(g, queries)?;
        let unit = g.tanh(raw);
        let half = g.constant(Matrix::row_vector(&range.half_extent()));
        let center = g.constant(Matrix::row_vector(&range.center()));
        let spread = g.mul(unit, half)?;
        let refs = g.add(spread, center)?;
        let logits = self.score.forward(g, queries)?;
        let scores = g.sigmoid(logits);
        Ok(DecodedQueries {
            set: QueryVars {
                kind,
                agent,
                queries,
                refs,
                scores,
            },
            logits,
        })
    }
}

impl Parameterized for QueryHead {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.embed);
        self.attn.visit(f);
        self.refs.visit(f);
        self.score.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.embed);
        self.attn.visit_mut(f);
        self.refs.visit_mut(f);
        self.score.visit_mut(f);
    }
}

/// Track, map and occupancy heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionHeads {
    pub track: QueryHead,
    pub map: QueryHead,
    pub occ: Linear,
}

/// Tape outputs of [`PerceptionHeads::forward`].
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub track: DecodedQueries,
    pub map: DecodedQueries,
    /// `(H·W)×1` occupancy logits, token order = row-major cells.
    pub occ_logits: Var,
}

impl PerceptionHeads {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        Ok(PerceptionHeads {
            track: QueryHead::new(rng, cfg.n_track, cfg)?,
            map: QueryHead::new(rng, cfg.n_map, cfg)?,
            occ: Linear::new(rng, cfg.dim, 1),
        })
    }

    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        agent: u32,
        bev: Var,
        range: &PerceptionRange,
    ) -> Result<HeadOutputs> {
        let tq = self.track.attend(g, bev)?;
        let track = self.track.decode(g, QueryKind::Track, agent, tq, range)?;
        let mq = self.map.attend(g, bev)?;
        let map = self.map.decode(g, QueryKind::Map, agent, mq, range)?;
        let occ_logits = self.occ.forward(g, bev)?;
        Ok(HeadOutputs {
            track,
            map,
            occ_logits,
        })
    }
}

impl Parameterized for PerceptionHeads {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.track.visit(f);
        self.map.visit(f);
        self.occ.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.track.visit_mut(f);
        self.map.visit_mut(f);
        self.occ.visit_mut(f);
    }
}

/// Occupancy grid over `range` from `(H·W)×1` probabilities.
pub fn occupancy_from_probs(
    probs: &Matrix,
    height: usize,
    width: usize,
    range: &PerceptionRange,
) -> Result<OccupancyGrid> {
    if probs.shape() != (height * width, 1) {
        return Err(Error::dim("occupancy", "probability column does not match grid"));
    }
    let grid = OccupancyGrid::covering(range, height, width)?;
    OccupancyGrid::from_probs(
        height,
        width,
        grid.cell_size(),
        grid.origin(),
        probs.data().to_vec(),
    )
}

/// Decodes track queries, map queries and an occupancy grid from a BEV state.
pub fn perception_heads(
    heads: &PerceptionHeads,
    state: &BevState,
    agent: u32,
    range: &PerceptionRange,
) -> Result<(QuerySet, QuerySet, OccupancyGrid)> {
    let mut g = Graph::new();
    let bev = g.constant(state.tokens.clone());
    let out = heads.forward(&mut g, agent, bev, range)?;
    let probs = g.sigmoid(out.occ_logits);
    let grid = occupancy_from_probs(g.value(probs), state.height, state.width, range)?;
    Ok((out.track.set.value(&g)?, out.map.set.value(&g)?, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ModelConfig, PerceptionHeads, BevState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig::micro();
        let heads = PerceptionHeads::new(&mut rng, &cfg).unwrap();
        let tokens = Matrix::from_vec(
            64,
            cfg.dim,
            (0..64 * cfg.dim).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        (cfg, heads, BevState::new(8, 8, 12.8, tokens).unwrap())
    }

    #[test]
    fn zero_heads_give_bias_scores() {
        let (cfg, mut heads, state) = setup(0);
        for h in [&mut heads.track, &mut heads.map] {
            h.score = Linear::zeros(cfg.dim, 1);
            h.score.bias = Matrix::scalar(0.4);
        }
        let (track, map, _) = perception_heads(&heads, &state, 0, &PerceptionRange::EGO).unwrap();
        let want = 1.0 / (1.0 + (-0.4f64).exp());
        assert_eq!(track.len(), cfg.n_track);
        assert_eq!(map.len(), cfg.n_map);
        for s in track.scores.iter().chain(&map.scores) {
            assert!((s - want).abs() < 1e-15);
        }
    }

    #[test]
    fn outputs_respect_ranges() {
        for seed in 0..5 {
            let (_, mut heads, state) = setup(seed);
            // large weights push tanh into saturation
            heads.track.refs.weight = heads.track.refs.weight.scale(50.0);
            for range in [PerceptionRange::EGO, PerceptionRange::INFRASTRUCTURE] {
                let (track, map, occ) = perception_heads(&heads, &state, 1, &range).unwrap();
                for p in track.refs.points.iter().chain(&map.refs.points) {
                    assert!(range.contains(*p), "{p:?} outside {range:?}");
                }
                assert!(occ.probs().iter().all(|p| (0.0..=1.0).contains(p)));
                assert_eq!(occ.origin(), [range.x_min, range.y_min]);
            }
        }
    }
}
