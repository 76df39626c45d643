use serde::{Deserialize, Serialize};

use super::pipeline::{ego_forward, infra_messages, EgoStack, ModelParams, Received, RunConfig};
use super::scenario::Scenario;
use crate::comm::constrain;
use crate::error::{Error, Result};
use crate::model::{LossBreakdown, ModelConfig};
use crate::moe::RoutingStats;
use crate::numerics::{Graph, Matrix, Parameterized};

/// Loss trajectory and final routing of a gradient-descent run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss before each update.
    pub history: Vec<LossBreakdown>,
    /// Loss after the last update.
    pub final_loss: LossBreakdown,
    /// Routing of every MoE stage after the last update.
    pub routing: Vec<RoutingStats>,
}

impl TrainReport {
    /// `1 − final / initial` of the total loss.
    pub fn reduction(&self) -> f64 {
        match self.history.first() {
            Some(first) => 1.0 - self.final_loss.total / first.total,
            None => 0.0,
        }
    }

    /// Smallest per-expert load fraction over all MoE stages; `None` for
    /// dense models.
    pub fn min_load(&self) -> Option<f64> {
        self.routing
            .iter()
            .flat_map(|s| s.l.iter().copied())
            .min_by(f64::total_cmp)
    }

    /// Entropy (nats) of each stage's load distribution.
    pub fn load_entropy(&self) -> Vec<f64> {
        self.routing
            .iter()
            .map(|s| -s.l.iter().filter(|&&l| l > 0.0).map(|&l| l * l.ln()).sum::<f64>())
            .collect()
    }
}

/// Plain gradient descent of the ego stack on the joint loss of one fixed
/// scene. The roadside unit is frozen, so its messages are computed once.
pub fn train(params: &mut ModelParams, scn: &Scenario, cfg: &RunConfig, steps: usize, lr: f64) -> Result<TrainReport> {
    if steps == 0 {
        return Err(Error::Config("training needs at least one step".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    cfg.validate()?;
    let mc = cfg.model_config();
    params.check(&mc)?;
    scn.validate()?;
    let sent = infra_messages(scn, &cfg.toggles, &params.infra, &mc)?;
    let rx = Received::from_messages(&constrain(&sent, &cfg.budget)?, mc.dim)?;

    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, _, grads) = evaluate(&params.ego, scn, &rx, &mc, step)?;
        history.push(loss);
        let mut i = 0;
        params.ego.visit_mut(&mut |p| {
            for (w, d) in p.data_mut().iter_mut().zip(grads[i].data()) {
                *w -= lr * d;
            }
            i += 1;
        });
    }
    let (final_loss, routing, _) = evaluate(&params.ego, scn, &rx, &mc, steps)?;
    Ok(TrainReport { history, final_loss, routing })
}

fn evaluate(
    ego: &EgoStack,
    scn: &Scenario,
    rx: &Received,
    cfg: &ModelConfig,
    step: usize,
) -> Result<(LossBreakdown, Vec<RoutingStats>, Vec<Matrix>)> {
    let mut g = Graph::new();
    g.register(ego);
    let at_step = |e: Error| match e {
        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
        e => e,
    };
    let tape = ego_forward(&mut g, ego, scn, rx, cfg).map_err(at_step)?;
    let loss = tape.loss.breakdown(&g);
    if !loss.terms().iter().all(|t| t.is_finite()) || !loss.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {step}: {loss:?}")));
    }
    let routing = tape.records.iter().map(|r| r.stats().clone()).collect();
    let grads = g.backward(tape.loss.total).map_err(at_step)?;
    Ok((loss, routing, g.param_grads(&grads, ego)))
}

/// Fresh parameters from `cfg.seed`, trained on `scn`.
pub fn train_smoke(scn: &Scenario, cfg: &RunConfig, steps: usize, lr: f64) -> Result<TrainReport> {
    let mut params = ModelParams::new(cfg.seed, &cfg.model_config())?;
    train(&mut params, scn, cfg, steps, lr)
}
