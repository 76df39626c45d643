use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{ego_forward, infra_messages, ModelParams, Received, Toggles, INFRA_AGENT};
use super::scenario::{gen_scenario_with, ScenarioShape};
use crate::comm::{constrain, ChannelBudget};
use crate::error::Result;
use crate::fusion::FusionParams;
use crate::geometry::{PointSet2D, RigidTransform2D};
use crate::model::{EncoderLayer, ModelConfig, MoeRecord, QueryKind, QuerySet, QueryVars};
use crate::moe::MoeLayer;
use crate::numerics::{grad_check, AttentionBlock, GradCheckOptions, GradCheckReport, Graph, Matrix, PerceptronBlock, Var};

/// One named gradient check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
    pub seconds: f64,
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("finite")
}

/// `Σ tanh(y ⊙ w)`: a scalar that mixes every output coordinate with its
/// own weight.
fn probe(g: &mut Graph, y: Var, w: &Matrix) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    let p = g.tanh(p);
    Ok(g.sum(p))
}

fn query_set(rng: &mut ChaCha8Rng, kind: QueryKind, n: usize, dim: usize, spread: f64) -> QuerySet {
    let refs = (0..n)
        .map(|_| [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)])
        .collect();
    let scores = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
    QuerySet::new(kind, INFRA_AGENT, random(rng, n, dim), PointSet2D::new(refs).expect("finite"), scores)
        .expect("consistent query set")
}

fn timed(name: &str, run: impl FnOnce() -> Result<GradCheckReport>) -> Result<GradCheckCase> {
    let start = Instant::now();
    let report = run()?;
    Ok(GradCheckCase { name: name.to_string(), report, seconds: start.elapsed().as_secs_f64() })
}

/// Gradient checks of every trainable building block and of the full ego
/// objective on the micro scene. `opts.max_coords_per_tensor` applies to the
/// end-to-end case only; the block cases check every coordinate.
pub fn gradcheck_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckCase>> {
    let cfg = ModelConfig::micro();
    let d = cfg.dim;
    let full = GradCheckOptions { max_coords_per_tensor: None, ..opts.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = Vec::new();

    let block = PerceptronBlock::new(&mut rng, d, cfg.ffn_hidden, d);
    let (x, w) = (random(&mut rng, 6, d), random(&mut rng, 6, d));
    cases.push(timed("perceptron", || {
        grad_check(&block, &full, |b, g| {
            let xv = g.constant(x.clone());
            let y = b.forward(g, xv)?;
            probe(g, y, &w)
        })
    })?);

    let attn = AttentionBlock::new(&mut rng, d, cfg.heads)?;
    let (q, c, w) = (random(&mut rng, 5, d), random(&mut rng, 7, d), random(&mut rng, 5, d));
    cases.push(timed("attention", || {
        grad_check(&attn, &full, |b, g| {
            let qv = g.constant(q.clone());
            let cv = g.constant(c.clone());
            let y = b.attend(g, qv, cv)?;
            let s = b.self_attend(g, y)?;
            probe(g, s, &w)
        })
    })?);

    let moe = MoeLayer::new(&mut rng, d, cfg.ffn_hidden, cfg.experts, cfg.top_k, cfg.lambda)?;
    let (x, w) = (random(&mut rng, 8, d), random(&mut rng, 8, d));
    cases.push(timed("moe_layer", || {
        grad_check(&moe, &full, |m, g| {
            let xv = g.constant(x.clone());
            let out = m.forward(g, xv)?;
            let p = probe(g, out.tokens, &w)?;
            let pen = m.balance_penalty(g, &out)?;
            g.add(p, pen)
        })
    })?);

    let layer = EncoderLayer::new(&mut rng, &cfg)?;
    let (t, ctx, w) = (random(&mut rng, 8, d), random(&mut rng, 5, d), random(&mut rng, 8, d));
    cases.push(timed("encoder_layer", || {
        grad_check(&layer, &full, |l, g| {
            let tv = g.constant(t.clone());
            let cv = g.constant(ctx.clone());
            let mut records: Vec<MoeRecord> = Vec::new();
            let y = l.forward(g, tv, cv, &mut records)?;
            let mut total = probe(g, y, &w)?;
            for r in &records {
                let pen = r.penalty(g)?;
                total = g.add(total, pen)?;
            }
            Ok(total)
        })
    })?);

    let fusion = FusionParams::new(&mut rng, &cfg)?;
    let pose = RigidTransform2D::new(0.7, 12.0, -4.0);
    let mut ego = query_set(&mut rng, QueryKind::Track, 4, d, 40.0);
    ego.agent = 0;
    let other = query_set(&mut rng, QueryKind::Track, 3, d, 40.0);
    let w = random(&mut rng, 7, d);
    cases.push(timed("track_fusion", || {
        grad_check(&fusion, &full, |f, g| {
            let ev = QueryVars::constant(g, &ego);
            let out = f.track_fusion_vars(g, &ev, &other, &pose)?;
            probe(g, out.queries, &w)
        })
    })?);

    let ego_modes = random(&mut rng, 2 * cfg.modes, d);
    let other_modes = query_set(&mut rng, QueryKind::Motion, cfg.modes, d, 40.0);
    let tracks = random(&mut rng, 5, d);
    let w = random(&mut rng, 3 * cfg.modes, d);
    cases.push(timed("traj_fusion", || {
        grad_check(&fusion, &full, |f, g| {
            let e = g.constant(ego_modes.clone());
            let qa = g.constant(tracks.clone());
            let out = f.traj_fusion_vars(g, e, &other_modes, qa, &pose)?;
            probe(g, out, &w)
        })
    })?);

    let params = ModelParams::new(opts.seed, &cfg)?;
    let scn = gen_scenario_with(opts.seed, 0.5, ScenarioShape::of(&cfg))?;
    let sent = infra_messages(&scn, &Toggles::default(), &params.infra, &cfg)?;
    let rx = Received::from_messages(&constrain(&sent, &ChannelBudget::unlimited())?, d)?;
    cases.push(timed("joint_loss", || {
        grad_check(&params.ego, opts, |m, g| Ok(ego_forward(g, m, &scn, &rx, &cfg)?.loss.total))
    })?);
    Ok(cases)
}
