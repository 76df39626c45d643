use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::encoder::{feed_forward, FeedForward, MoeRecord};
use super::types::{BevState, QueryKind, QuerySet, QueryVars, TrajectorySet};
use crate::error::{Error, Result};
use crate::numerics::{embedding, AttentionBlock, Graph, Linear, Matrix, Parameterized, PerceptronBlock, Var};

/// Decoder layer: per-agent self-attention across modes, cross-attention to
/// BEV tokens (both residual), then the feed-forward stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: AttentionBlock,
    pub cross_attn: AttentionBlock,
    pub ffn: FeedForward,
}

impl Parameterized for DecoderLayer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.self_attn.visit(f);
        self.cross_attn.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.self_attn.visit_mut(f);
        self.cross_attn.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Mode-query decoder with trajectory and mode-score heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionDecoder {
    pub mode_embed: Matrix,
    pub anchor_embed: PerceptronBlock,
    pub layers: Vec<DecoderLayer>,
    /// `D → 2T` per-step offsets, interleaved `x₁ y₁ x₂ y₂ …`.
    pub traj: Linear,
    pub mode_score: Linear,
    position_scale: f64,
    step_scale: f64,
}

/// Tape outputs of the decoder (or of a decode after fusion).
#[derive(Clone, Copy, Debug)]
pub struct MotionOutputs {
    /// Motion queries; refs are each agent's anchor repeated per mode and
    /// scores the mode probabilities.
    pub set: QueryVars,
    /// `(A·M)×(2T)` absolute positions.
    pub traj: Var,
    /// `A×M` mode probabilities.
    pub mode_probs: Var,
}

fn repeat_each(n: usize, times: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat(i).take(times)).collect()
}

const TRAJ_INIT_SCALE: f64 = 0.1;

fn tile(n: usize, times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..n).collect()
}

impl MotionDecoder {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        let mode_embed = embedding(rng, cfg.modes, cfg.dim);
        let anchor_embed = PerceptronBlock::new(rng, 2, cfg.ffn_hidden, cfg.dim);
        let layers = (0..cfg.decoder_layers)
            .map(|_| {
                Ok(DecoderLayer {
                    self_attn: AttentionBlock::new(rng, cfg.dim, cfg.heads)?,
                    cross_attn: AttentionBlock::new(rng, cfg.dim, cfg.heads)?,
                    ffn: FeedForward::new(rng, cfg, cfg.moe_decoder)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // Small offsets keep initial paths near the anchors without tying modes.
        let mut traj = Linear::new(rng, cfg.dim, 2 * cfg.future_steps);
        traj.weight = traj.weight.map(|w| TRAJ_INIT_SCALE * w);
        Ok(MotionDecoder {
            mode_embed,
            anchor_embed,
            layers,
            traj,
            mode_score: Linear::new(rng, cfg.dim, 1),
            position_scale: cfg.position_scale,
            step_scale: cfg.step_scale,
        })
    }

    pub fn modes(&self) -> usize {
        self.mode_embed.rows()
    }

    pub fn steps(&self) -> usize {
        self.traj.output_dim() / 2
    }

    pub fn dim(&self) -> usize {
        self.mode_embed.cols()
    }

    fn empty_outputs<'p>(&self, g: &mut Graph<'p>, agent: u32) -> MotionOutputs {
        let m = self.modes();
        MotionOutputs {
            set: QueryVars {
                kind: QueryKind::Motion,
                agent,
                queries: g.constant(Matrix::zeros(0, self.dim())),
                refs: g.constant(Matrix::zeros(0, 2)),
                scores: g.constant(Matrix::zeros(0, 1)),
            },
            traj: g.constant(Matrix::zeros(0, 2 * self.steps())),
            mode_probs: g.constant(Matrix::zeros(0, m)),
        }
    }

    /// Decodes `tracks` (one agent per row) into mode queries and
    /// trajectories. An empty input gives empty outputs.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        tracks: &QueryVars,
        bev: Var,
        records: &mut Vec<MoeRecord<'p>>,
    ) -> Result<MotionOutputs> {
        let a = tracks.len(g);
        if a == 0 {
            return Ok(self.empty_outputs(g, tracks.agent));
        }
        let m = self.modes();
        let per_agent = repeat_each(a, m);
        let anchors = g.gather_rows(tracks.refs, &per_agent)?;

        let feats = g.gather_rows(tracks.queries, &per_agent)?;
        let me = g.param(&self.mode_embed);
        let modes = g.gather_rows(me, &tile(m, a))?;
        let scaled = g.scale(tracks.refs, 1.0 / self.position_scale);
        let pos = self.anchor_embed.forward(g, scaled)?;
        let pos = g.gather_rows(pos, &per_agent)?;
        let q = g.add(feats, modes)?;
        let mut q = g.add(q, pos)?;

        for layer in &self.layers {
            let mut blocks = Vec::with_capacity(a);
            for i in 0..a {
                let blk = g.slice_rows(q, i * m, m)?;
                let s = layer.self_attn.self_attend(g, blk)?;
                blocks.push(g.add(blk, s)?);
            }
            let s = g.concat_rows(&blocks)?;
            let c = layer.cross_attn.attend(g, s, bev)?;
            let c = g.add(s, c)?;
            q = feed_forward(&layer.ffn, g, c, records)?;
        }
        self.decode(g, tracks.agent, q, anchors)
    }

    /// Trajectory and mode-score heads on `(A·M)×D` mode queries whose
    /// per-row anchors are `anchors` (`(A·M)×2`).
    pub fn decode<'p>(
        &'p self,
        g: &mut Graph<'p>,
        agent: u32,
        queries: Var,
        anchors: Var,
    ) -> Result<MotionOutputs> {
        let rows = g.shape(queries).0;
        let m = self.modes();
        if rows == 0 {
            return Ok(self.empty_outputs(g, agent));
        }
        if rows % m != 0 || g.shape(anchors) != (rows, 2) {
            return Err(Error::dim(
                "motion decode",
                format!("{rows} mode rows for {m} modes"),
            ));
        }
        let t = self.steps();
        let offs = self.traj.forward(g, queries)?;
        let offs = g.scale(offs, self.step_scale);
        let cum = g.constant(cumsum_matrix(t));
        let path = g.matmul(offs, cum)?;
        let spread = g.constant(tile_matrix(t));
        let base = g.matmul(anchors, spread)?;
        let traj = g.add(path, base)?;

        let logits = self.mode_score.forward(g, queries)?;
        let logits = g.reshape(logits, rows / m, m)?;
        let mode_probs = g.softmax_rows(logits);
        let scores = g.reshape(mode_probs, rows, 1)?;
        Ok(MotionOutputs {
            set: QueryVars {
                kind: QueryKind::Motion,
                agent,
                queries,
                refs: anchors,
                scores,
            },
            traj,
            mode_probs,
        })
    }
}

impl Parameterized for MotionDecoder {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.mode_embed);
        self.anchor_embed.visit(f);
        self.layers.visit(f);
        self.traj.visit(f);
        self.mode_score.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.mode_embed);
        self.anchor_embed.visit_mut(f);
        self.layers.visit_mut(f);
        self.traj.visit_mut(f);
        self.mode_score.visit_mut(f);
    }
}

/// `C[2s+c, 2t+c] = 1` for `s ≤ t`: right-multiplying interleaved offsets
/// by `C` gives cumulative positions.
pub(crate) fn cumsum_matrix(steps: usize) -> Matrix {
    let mut c = Matrix::zeros(2 * steps, 2 * steps);
    for s in 0..steps {
        for t in s..steps {
            c.set(2 * s, 2 * t, 1.0);
            c.set(2 * s + 1, 2 * t + 1, 1.0);
        }
    }
    c
}

/// `2×2T` matrix copying a point into every step slot.
pub(crate) fn tile_matrix(steps: usize) -> Matrix {
    let mut r = Matrix::zeros(2, 2 * steps);
    for t in 0..steps {
        r.set(0, 2 * t, 1.0);
        r.set(1, 2 * t + 1, 1.0);
    }
    r
}

/// Runs the decoder on fixed track queries and BEV tokens.
pub fn motion_decoder(
    decoder: &MotionDecoder,
    tracks: &QuerySet,
    state: &BevState,
) -> Result<(QuerySet, TrajectorySet)> {
    let mut g = Graph::new();
    let tv = QueryVars::constant(&mut g, tracks);
    let bev = g.constant(state.tokens.clone());
    let mut records = Vec::new();
    let out = decoder.forward(&mut g, &tv, bev, &mut records)?;
    let set = out.set.value(&g)?;
    let traj = if set.is_empty() {
        TrajectorySet::empty(decoder.modes(), decoder.steps())
    } else {
        TrajectorySet::from_matrices(decoder.modes(), g.value(out.traj), g.value(out.mode_probs))?
    };
    Ok((set, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointSet2D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(rng: &mut ChaCha8Rng, cfg: &ModelConfig, agents: usize) -> (QuerySet, BevState) {
        let q = Matrix::from_vec(
            agents,
            cfg.dim,
            (0..agents * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let refs = PointSet2D::new((0..agents).map(|i| [3.0 * i as f64, -2.0]).collect()).unwrap();
        let tracks = QuerySet::new(QueryKind::Track, 0, q, refs, vec![0.5; agents]).unwrap();
        let tokens = Matrix::from_vec(
            16,
            cfg.dim,
            (0..16 * cfg.dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (tracks, BevState::new(4, 4, 1.0, tokens).unwrap())
    }

    #[test]
    fn shapes_scores_and_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            modes: 6,
            future_steps: 12,
            ..ModelConfig::micro()
        };
        let dec = MotionDecoder::new(&mut rng, &cfg).unwrap();
        let (tracks, bev) = inputs(&mut rng, &cfg, 2);
        let (set, traj) = motion_decoder(&dec, &tracks, &bev).unwrap();
        assert_eq!((traj.agents, traj.modes, traj.steps), (2, 6, 12));
        assert_eq!(set.len(), 12);
        for a in 0..2 {
            let s: f64 = traj.mode_scores(a).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let mut g = Graph::new();
        let tv = QueryVars::constant(&mut g, &tracks);
        let b = g.constant(bev.tokens.clone());
        let mut records = Vec::new();
        dec.forward(&mut g, &tv, b, &mut records).unwrap();
        assert_eq!(records.len(), cfg.decoder_layers);
        assert!(records.iter().all(|r| r.stats().tokens() == 12));
    }

    #[test]
    fn zero_head_collapses_to_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig::micro();
        let mut dec = MotionDecoder::new(&mut rng, &cfg).unwrap();
        dec.traj = Linear::zeros(cfg.dim, 2 * cfg.future_steps);
        let (tracks, bev) = inputs(&mut rng, &cfg, 3);
        let (_, traj) = motion_decoder(&dec, &tracks, &bev).unwrap();
        for a in 0..3 {
            for m in 0..cfg.modes {
                for p in traj.mode(a, m) {
                    assert_eq!(p, tracks.refs.points[a]);
                }
            }
        }
    }

    #[test]
    fn empty_tracks_give_empty_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = ModelConfig::micro();
        let dec = MotionDecoder::new(&mut rng, &cfg).unwrap();
        let (_, bev) = inputs(&mut rng, &cfg, 1);
        let empty = QuerySet::empty(QueryKind::Track, 0, cfg.dim);
        let (set, traj) = motion_decoder(&dec, &empty, &bev).unwrap();
        assert!(set.is_empty());
        assert_eq!(traj.agents, 0);
    }

    #[test]
    fn cumsum_accumulates() {
        let offs = Matrix::row_vector(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let c = offs.matmul(&cumsum_matrix(3)).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 4.0, 6.0, 9.0, 12.0]);
        let t = Matrix::row_vector(&[7.0, 8.0]).matmul(&tile_matrix(2)).unwrap();
        assert_eq!(t.data(), &[7.0, 8.0, 7.0, 8.0]);
    }
}
