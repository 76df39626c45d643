use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::types::BevState;
use crate::error::Result;
use crate::moe::{MoeLayer, MoeOutput, RoutingStats};
use crate::numerics::{AttentionBlock, Graph, Matrix, Parameterized, PerceptronBlock, Var};

/// Position-wise feed-forward stage: a plain perceptron or a sparse MoE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeedForward {
    Dense(PerceptronBlock),
    Moe(MoeLayer),
}

impl FeedForward {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig, moe: bool) -> Result<Self> {
        Ok(if moe {
            FeedForward::Moe(MoeLayer::new(
                rng,
                cfg.dim,
                cfg.ffn_hidden,
                cfg.experts,
                cfg.top_k,
                cfg.lambda,
            )?)
        } else {
            FeedForward::Dense(PerceptronBlock::new(rng, cfg.dim, cfg.ffn_hidden, cfg.dim))
        })
    }

    /// Returns the output and, for the MoE variant, its routing record.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<(Var, Option<MoeOutput>)> {
        match self {
            FeedForward::Dense(p) => Ok((p.forward(g, x)?, None)),
            FeedForward::Moe(m) => {
                let out = m.forward(g, x)?;
                Ok((out.tokens, Some(out)))
            }
        }
    }

    pub fn moe(&self) -> Option<&MoeLayer> {
        match self {
            FeedForward::Moe(m) => Some(m),
            FeedForward::Dense(_) => None,
        }
    }

    /// The plain block computing the same map as a single-expert MoE.
    pub fn dense_equivalent(&self) -> Option<FeedForward> {
        match self {
            FeedForward::Dense(p) => Some(FeedForward::Dense(p.clone())),
            FeedForward::Moe(m) if m.num_experts() == 1 => {
                Some(FeedForward::Dense(m.experts[0].clone()))
            }
            FeedForward::Moe(_) => None,
        }
    }
}

impl Parameterized for FeedForward {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        match self {
            FeedForward::Dense(p) => p.visit(f),
            FeedForward::Moe(m) => m.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        match self {
            FeedForward::Dense(p) => p.visit_mut(f),
            FeedForward::Moe(m) => m.visit_mut(f),
        }
    }
}

/// Routing record of one MoE stage, kept for the balance penalty.
#[derive(Clone, Debug)]
pub struct MoeRecord<'p> {
    pub layer: &'p MoeLayer,
    pub output: MoeOutput,
}

impl<'p> MoeRecord<'p> {
    pub fn stats(&self) -> &RoutingStats {
        &self.output.stats
    }

    pub fn penalty(&self, g: &mut Graph<'p>) -> Result<Var> {
        self.layer.balance_penalty(g, &self.output)
    }
}

/// Runs `ffn` and appends its routing record, if any.
pub(crate) fn feed_forward<'p>(
    ffn: &'p FeedForward,
    g: &mut Graph<'p>,
    x: Var,
    records: &mut Vec<MoeRecord<'p>>,
) -> Result<Var> {
    let (y, out) = ffn.forward(g, x)?;
    if let (Some(output), Some(layer)) = (out, ffn.moe()) {
        records.push(MoeRecord { layer, output });
    }
    Ok(y)
}

/// One BEV encoder layer: self-attention over grid tokens, cross-attention
/// into sensor context, then the feed-forward stage. Both attention stages
/// are residual; the feed-forward stage is not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub self_attn: AttentionBlock,
    pub cross_attn: AttentionBlock,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        Ok(EncoderLayer {
            self_attn: AttentionBlock::new(rng, cfg.dim, cfg.heads)?,
            cross_attn: AttentionBlock::new(rng, cfg.dim, cfg.heads)?,
            ffn: FeedForward::new(rng, cfg, cfg.moe_encoder)?,
        })
    }

    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        tokens: Var,
        context: Var,
        records: &mut Vec<MoeRecord<'p>>,
    ) -> Result<Var> {
        let s = self.self_attn.self_attend(g, tokens)?;
        let a = g.add(tokens, s)?;
        let c = self.cross_attn.attend(g, a, context)?;
        let b = g.add(a, c)?;
        feed_forward(&self.ffn, g, b, records)
    }
}

impl Parameterized for EncoderLayer {
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

/// Applies one layer to a BEV state; returns the new state and the layer's
/// routing statistics (MoE variant only).
pub fn encoder_layer(
    state: &BevState,
    context: &Matrix,
    layer: &EncoderLayer,
) -> Result<(BevState, Option<RoutingStats>)> {
    let mut g = Graph::new();
    let t = g.constant(state.tokens.clone());
    let c = g.constant(context.clone());
    let mut records = Vec::new();
    let y = layer.forward(&mut g, t, c, &mut records)?;
    let stats = records.pop().map(|r| r.output.stats);
    let next = BevState::new(state.height, state.width, state.cell_size, g.value(y).clone())?;
    Ok((next, stats))
}

/// Applies `layers` in order. Returns the final state and the summed balance
/// penalty of every MoE layer.
pub fn run_encoder(
    state: &BevState,
    context: &Matrix,
    layers: &[EncoderLayer],
) -> Result<(BevState, f64)> {
    let mut g = Graph::new();
    let mut t = g.constant(state.tokens.clone());
    let c = g.constant(context.clone());
    let mut records = Vec::new();
    for layer in layers {
        t = layer.forward(&mut g, t, c, &mut records)?;
    }
    let mut penalty = 0.0;
    for r in &records {
        let p = r.penalty(&mut g)?;
        penalty += g.value(p).item()?;
    }
    let next = BevState::new(state.height, state.width, state.cell_size, g.value(t).clone())?;
    Ok((next, penalty))
}
