use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::motion::cumsum_matrix;
use super::types::QuerySet;
use crate::error::{Error, Result};
use crate::numerics::{embedding, AttentionBlock, Graph, Matrix, Parameterized, PerceptronBlock, Var};

/// Metres per second per unit of the velocity feature.
const VELOCITY_SCALE: f64 = 10.0;

/// Ego query pooling fused motion queries, then a waypoint perceptron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Planner {
    pub ego_query: Matrix,
    pub attn: AttentionBlock,
    /// `[pooled ego query, velocity] → 2·T_plan` per-step offsets.
    pub decode: PerceptronBlock,
    step_scale: f64,
}

impl Planner {
    pub fn new<R: Rng>(rng: &mut R, cfg: &ModelConfig) -> Result<Self> {
        Ok(Planner {
            ego_query: embedding(rng, 1, cfg.dim),
            attn: AttentionBlock::new(rng, cfg.dim, cfg.heads)?,
            decode: PerceptronBlock::new(rng, cfg.dim + 2, cfg.ffn_hidden, 2 * cfg.plan_steps),
            step_scale: cfg.step_scale,
        })
    }

    pub fn steps(&self) -> usize {
        self.decode.output_dim() / 2
    }

    /// `1×(2T)` interleaved waypoints in the ego frame, starting from the
    /// ego origin.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, motion: Var, velocity: [f64; 2]) -> Result<Var> {
        if g.shape(motion).0 == 0 {
            return Err(Error::Contract("planner needs at least one motion query".into()));
        }
        let q = g.param(&self.ego_query);
        let pooled = self.attn.attend(g, q, motion)?;
        let e = g.add(q, pooled)?;
        let v = g.constant(Matrix::row_vector(&[
            velocity[0] / VELOCITY_SCALE,
            velocity[1] / VELOCITY_SCALE,
        ]));
        let x = g.concat_cols(&[e, v])?;
        let offs = self.decode.forward(g, x)?;
        let offs = g.scale(offs, self.step_scale);
        let c = g.constant(cumsum_matrix(self.steps()));
        g.matmul(offs, c)
    }
}

impl Parameterized for Planner {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.ego_query);
        self.attn.visit(f);
        self.decode.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.ego_query);
        self.attn.visit_mut(f);
        self.decode.visit_mut(f);
    }
}

/// Interleaved `1×2T` row to waypoints.
pub fn waypoints(row: &Matrix) -> Vec<[f64; 2]> {
    row.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Plans `T_plan` ego waypoints from fused motion queries.
pub fn planner_head(planner: &Planner, fused: &QuerySet, velocity: [f64; 2]) -> Result<Vec<[f64; 2]>> {
    let mut g = Graph::new();
    let m = g.constant(fused.queries.clone());
    let plan = planner.forward(&mut g, m, velocity)?;
    Ok(waypoints(g.value(plan)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PointSet2D;
    use crate::model::QueryKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fused(rng: &mut ChaCha8Rng, n: usize, d: usize) -> QuerySet {
        let q = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let refs = PointSet2D::new(vec![[0.0, 0.0]; n]).unwrap();
        QuerySet::new(QueryKind::Motion, 0, q, refs, vec![1.0 / 6.0; n]).unwrap()
    }

    #[test]
    fn zero_decoder_stays_at_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig::micro();
        let mut p = Planner::new(&mut rng, &cfg).unwrap();
        p.decode = PerceptronBlock::zeros(cfg.dim + 2, cfg.ffn_hidden, 2 * cfg.plan_steps);
        let plan = planner_head(&p, &fused(&mut rng, 12, cfg.dim), [5.0, 0.0]).unwrap();
        assert_eq!(plan, vec![[0.0, 0.0]; 6]);
    }

    #[test]
    fn shape_and_determinism() {
        let cfg = ModelConfig::micro();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let p = Planner::new(&mut rng, &cfg).unwrap();
            planner_head(&p, &fused(&mut rng, 6, cfg.dim), [3.0, 1.0]).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 6);
        let b = run();
        let bits = |v: &[[f64; 2]]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn empty_motion_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ModelConfig::micro();
        let p = Planner::new(&mut rng, &cfg).unwrap();
        let empty = QuerySet::empty(QueryKind::Motion, 0, cfg.dim);
        assert!(planner_head(&p, &empty, [0.0, 0.0]).is_err());
    }
}
