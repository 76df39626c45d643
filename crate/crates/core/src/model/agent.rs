use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::encoder::{EncoderLayer, MoeRecord};
use super::heads::{HeadOutputs, PerceptionHeads};
use super::motion::MotionDecoder;
use crate::error::{Error, Result};
use crate::geometry::PerceptionRange;
use crate::numerics::{embedding, Graph, Matrix, Parameterized, Var};

/// One agent's encoder, perception heads and motion decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentModel {
    /// Learnable initial BEV tokens, row-major over the grid.
    pub bev_queries: Matrix,
    pub encoder: Vec<EncoderLayer>,
    pub heads: PerceptionHeads,
    pub motion: MotionDecoder,
    pub bev_height: usize,
    pub bev_width: usize,
}

/// Tape outputs of [`AgentModel::perceive`].
#[derive(Clone, Copy, Debug)]
pub struct Perception {
    pub bev: Var,
    pub heads: HeadOutputs,
}

impl AgentModel {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let bev_queries = embedding(rng, cfg.bev_tokens(), cfg.dim);
        let encoder = (0..cfg.encoder_layers)
            .map(|_| EncoderLayer::new(rng, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(AgentModel {
            bev_queries,
            encoder,
            heads: PerceptionHeads::new(rng, cfg)?,
            motion: MotionDecoder::new(rng, cfg)?,
            bev_height: cfg.bev_height,
            bev_width: cfg.bev_width,
        })
    }

    pub fn dim(&self) -> usize {
        self.bev_queries.cols()
    }

    /// Encodes `context` (sensor tokens, `D` columns) into BEV tokens and
    /// decodes track, map and occupancy outputs.
    pub fn perceive<'p>(
        &'p self,
        g: &mut Graph<'p>,
        agent: u32,
        context: Var,
        range: &PerceptionRange,
        records: &mut Vec<MoeRecord<'p>>,
    ) -> Result<Perception> {
        if g.shape(context).0 == 0 {
            return Err(Error::Contract("sensor context must not be empty".into()));
        }
        let mut z = g.param(&self.bev_queries);
        for layer in &self.encoder {
            z = layer.forward(g, z, context, records)?;
        }
        let heads = self.heads.forward(g, agent, z, range)?;
        Ok(Perception { bev: z, heads })
    }

    /// Copy with every single-expert MoE stage replaced by its plain
    /// perceptron. `None` if some stage has more than one expert.
    pub fn densified(&self) -> Option<AgentModel> {
        let mut out = self.clone();
        for l in &mut out.encoder {
            l.ffn = l.ffn.dense_equivalent()?;
        }
        for l in &mut out.motion.layers {
            l.ffn = l.ffn.dense_equivalent()?;
        }
        Some(out)
    }
}

impl Parameterized for AgentModel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.bev_queries);
        self.encoder.visit(f);
        self.heads.visit(f);
        self.motion.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.bev_queries);
        self.encoder.visit_mut(f);
        self.heads.visit_mut(f);
        self.motion.visit_mut(f);
    }
}
