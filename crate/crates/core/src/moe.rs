//! Sparse mixture of experts with softmax gating and top-k routing.
//!
//! Each token is sent to the `k` experts with the highest gate probability
//! (ties go to the lower expert index). The selected probabilities are
//! renormalised to sum to one and used to mix the expert outputs. The
//! balance penalty is `λ·(Var(p) + Var(l))` with population variances, where
//! `p` is the batch-mean gate distribution and `l` the fraction of routed
//! selections each expert received.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{exact_sum, Graph, Linear, Matrix, Parameterized, PerceptronBlock, Var};

/// Expert bank plus gate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    pub experts: Vec<PerceptronBlock>,
    pub gate: Linear,
    k: usize,
    lambda: f64,
}

/// Batch routing summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// Mean gate probability per expert.
    pub p: Vec<f64>,
    /// Fraction of the `tokens × k` selections landing on each expert.
    pub l: Vec<f64>,
    /// Chosen experts per token, ascending.
    pub selections: Vec<Vec<usize>>,
}

impl RoutingStats {
    pub fn experts(&self) -> usize {
        self.p.len()
    }

    pub fn tokens(&self) -> usize {
        self.selections.len()
    }
}

impl MoeLayer {
    pub fn new<R: Rng>(
        rng: &mut R,
        dim: usize,
        hidden: usize,
        experts: usize,
        k: usize,
        lambda: f64,
    ) -> Result<Self> {
        let bank = (0..experts)
            .map(|_| PerceptronBlock::new(rng, dim, hidden, dim))
            .collect();
        Self::from_parts(bank, Linear::new(rng, dim, experts), k, lambda)
    }

    pub fn from_parts(
        experts: Vec<PerceptronBlock>,
        gate: Linear,
        k: usize,
        lambda: f64,
    ) -> Result<Self> {
        let e = experts.len();
        if e == 0 || k == 0 || k > e {
            return Err(Error::Config(format!("need 1 <= k <= E, got k={k}, E={e}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {lambda}")));
        }
        let (din, dout) = (experts[0].input_dim(), experts[0].output_dim());
        if experts
            .iter()
            .any(|x| x.input_dim() != din || x.output_dim() != dout)
        {
            return Err(Error::dim("MoeLayer", "experts disagree on dims"));
        }
        if gate.input_dim() != din || gate.output_dim() != e {
            return Err(Error::dim(
                "MoeLayer",
                format!("gate is {}x{}, expected {din}x{e}", gate.input_dim(), gate.output_dim()),
            ));
        }
        Ok(MoeLayer {
            experts,
            gate,
            k,
            lambda,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn input_dim(&self) -> usize {
        self.gate.input_dim()
    }

    fn check_tokens(&self, shape: (usize, usize)) -> Result<()> {
        if shape.1 != self.input_dim() {
            return Err(Error::dim(
                "moe",
                format!("tokens have {} cols, gate expects {}", shape.1, self.input_dim()),
            ));
        }
        if shape.0 == 0 {
            return Err(Error::Contract("moe routing needs at least one token".into()));
        }
        Ok(())
    }

    /// Gate probabilities and routing statistics for `tokens`.
    pub fn route(&self, tokens: &Matrix) -> Result<RoutingStats> {
        self.check_tokens(tokens.shape())?;
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let probs = self.gate_probs(&mut g, x)?;
        Ok(stats_from_probs(g.value(probs), self.k))
    }

    fn gate_probs<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        let logits = self.gate.forward(g, x)?;
        Ok(g.softmax_rows(logits))
    }

    /// Records the sparse mixture on the tape. Returns the output tokens,
    /// the gate probability node (for the balance penalty) and statistics.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<MoeOutput> {
        self.check_tokens(g.shape(x))?;
        let n = g.shape(x).0;
        let e = self.num_experts();
        let probs = self.gate_probs(g, x)?;
        let stats = stats_from_probs(g.value(probs), self.k);

        let mut mask = Matrix::zeros(n, e);
        for (t, sel) in stats.selections.iter().enumerate() {
            for &i in sel {
                mask.set(t, i, 1.0);
            }
        }
        let mask = g.constant(mask);
        let kept = g.mul(probs, mask)?;
        let ones = g.constant(Matrix::filled(e, 1, 1.0));
        let norm = g.matmul(kept, ones)?;
        let weights = g.div(kept, norm)?;

        let mut out: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let rows: Vec<usize> = (0..n).filter(|&t| stats.selections[t].contains(&i)).collect();
            if rows.is_empty() {
                continue;
            }
            let contrib = if rows.len() == n {
                let y = expert.forward(g, x)?;
                let w = g.slice_cols(weights, i, 1)?;
                g.mul(y, w)?
            } else {
                let xi = g.gather_rows(x, &rows)?;
                let y = expert.forward(g, xi)?;
                let w = g.slice_cols(weights, i, 1)?;
                let w = g.gather_rows(w, &rows)?;
                let yw = g.mul(y, w)?;
                g.scatter_rows(yw, &rows, n)?
            };
            out = Some(match out {
                None => contrib,
                Some(acc) => g.add(acc, contrib)?,
            });
        }
        Ok(MoeOutput {
            tokens: out.expect("every token selects at least one expert"),
            probs,
            stats,
        })
    }

    /// `λ·(Var(p) + Var(l))` on the tape, differentiable through `p`.
    pub fn balance_penalty<'p>(&'p self, g: &mut Graph<'p>, out: &MoeOutput) -> Result<Var> {
        balance_penalty(g, out.probs, &out.stats, self.lambda)
    }
}

impl Parameterized for MoeLayer {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.gate.visit(f);
        self.experts.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.gate.visit_mut(f);
        self.experts.visit_mut(f);
    }
}

/// Tape handles produced by [`MoeLayer::forward`].
#[derive(Clone, Debug)]
pub struct MoeOutput {
    pub tokens: Var,
    pub probs: Var,
    pub stats: RoutingStats,
}

fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut sel = order[..k].to_vec();
    sel.sort_unstable();
    sel
}

fn stats_from_probs(probs: &Matrix, k: usize) -> RoutingStats {
    let (n, e) = probs.shape();
    let selections: Vec<Vec<usize>> = (0..n).map(|t| top_k(probs.row(t), k)).collect();
    let p = (0..e)
        .map(|i| exact_sum((0..n).map(|t| probs.get(t, i))) / n as f64)
        .collect();
    let mut counts = vec![0usize; e];
    for sel in &selections {
        for &i in sel {
            counts[i] += 1;
        }
    }
    let l = counts
        .iter()
        .map(|&c| c as f64 / (n * k) as f64)
        .collect();
    RoutingStats { p, l, selections }
}

fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mean = exact_sum(v.iter().copied()) / v.len() as f64;
    exact_sum(v.iter().map(|x| (x - mean) * (x - mean))) / v.len() as f64
}

/// `λ·(Var(p) + Var(l))` with population variances over the experts.
pub fn balance_loss(stats: &RoutingStats, lambda: f64) -> f64 {
    lambda * (population_variance(&stats.p) + population_variance(&stats.l))
}

fn balance_penalty<'p>(g: &mut Graph<'p>, probs: Var, stats: &RoutingStats, lambda: f64) -> Result<Var> {
    let (n, e) = g.shape(probs);
    let avg = g.constant(Matrix::filled(1, n, 1.0 / n as f64));
    let p = g.matmul(avg, probs)?;
    let p_mean = g.mean(p);
    let dp = g.sub(p, p_mean)?;
    let sq = g.mul(dp, dp)?;
    let var_p = g.sum(sq);
    let var_p = g.scale(var_p, 1.0 / e as f64);
    let var_l = g.constant(Matrix::scalar(population_variance(&stats.l)));
    let total = g.add(var_p, var_l)?;
    Ok(g.scale(total, lambda))
}

/// Evaluates the layer on `tokens`.
pub fn moe_forward(layer: &MoeLayer, tokens: &Matrix) -> Result<(Matrix, RoutingStats)> {
    let mut g = Graph::new();
    let x = g.constant(tokens.clone());
    let out = layer.forward(&mut g, x)?;
    Ok((g.value(out.tokens).clone(), out.stats))
}

/// Evaluates the gate only.
pub fn route(layer: &MoeLayer, tokens: &Matrix) -> Result<RoutingStats> {
    layer.route(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, perceptron_forward, softmax_rows, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Perceptron computing exactly `x·A` via `relu(x)·A − relu(−x)·A`.
    fn linear_expert(a: &Matrix) -> PerceptronBlock {
        let d = a.rows();
        let mut w1 = Matrix::zeros(d, 2 * d);
        let mut w2 = Matrix::zeros(2 * d, a.cols());
        for i in 0..d {
            w1.set(i, i, 1.0);
            w1.set(i, d + i, -1.0);
            for j in 0..a.cols() {
                w2.set(i, j, a.get(i, j));
                w2.set(d + i, j, -a.get(i, j));
            }
        }
        PerceptronBlock {
            hidden: Linear {
                weight: w1,
                bias: Matrix::zeros(1, 2 * d),
            },
            output: Linear {
                weight: w2,
                bias: Matrix::zeros(1, a.cols()),
            },
        }
    }

    #[test]
    fn zero_gate_is_uniform_and_picks_lowest() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = MoeLayer::new(&mut rng, 4, 8, 4, 2, 0.03).unwrap();
        layer.gate = Linear::zeros(4, 4);
        let stats = route(&layer, &random(&mut rng, 5, 4)).unwrap();
        assert_eq!(stats.p, vec![0.25; 4]);
        assert_eq!(stats.selections[0], vec![0, 1]);
        // every token ties, so every token picks {0, 1}
        assert_eq!(stats.l, vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn favoured_expert_takes_all_load() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = MoeLayer::new(&mut rng, 3, 4, 2, 1, 0.03).unwrap();
        layer.gate = Linear::zeros(3, 2);
        layer.gate.bias = Matrix::row_vector(&[-1.0, 2.0]);
        let stats = route(&layer, &random(&mut rng, 7, 3)).unwrap();
        assert_eq!(stats.l, vec![0.0, 1.0]);
        assert!(stats.selections.iter().all(|s| s == &[1]));
    }

    #[test]
    fn selections_match_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = MoeLayer::new(&mut rng, 6, 8, 8, 2, 0.03).unwrap();
        let x = random(&mut rng, 16, 6);
        let stats = route(&layer, &x).unwrap();
        let logits = x.matmul(&layer.gate.weight).unwrap();
        let probs = softmax_rows(&logits.add(&Matrix::from_vec(16, 8, layer.gate.bias.data().repeat(16)).unwrap()).unwrap());
        for t in 0..16 {
            let mut pairs: Vec<(f64, usize)> = probs.row(t).iter().copied().zip(0..).collect();
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut want = vec![pairs[0].1, pairs[1].1];
            want.sort();
            assert_eq!(stats.selections[t], want);
        }
        assert_eq!(stats.selections.iter().map(Vec::len).sum::<usize>(), 32);
        assert!((stats.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((stats.l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_expert_is_the_expert() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = MoeLayer::new(&mut rng, 5, 10, 1, 1, 0.03).unwrap();
        let x = random(&mut rng, 9, 5);
        let (y, stats) = moe_forward(&layer, &x).unwrap();
        let plain = perceptron_forward(&layer.experts[0], &x).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&y), bits(&plain));
        assert_eq!(balance_loss(&stats, 0.03), 0.0);
    }

    #[test]
    fn identical_experts_ignore_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = MoeLayer::new(&mut rng, 4, 6, 5, 2, 0.03).unwrap();
        let shared = layer.experts[0].clone();
        layer.experts = vec![shared.clone(); 5];
        let x = random(&mut rng, 6, 4);
        let (y, _) = moe_forward(&layer, &x).unwrap();
        assert!(y.max_abs_diff(&perceptron_forward(&shared, &x).unwrap()) < 1e-12);
    }

    #[test]
    fn full_k_is_dense_mixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mats: Vec<Matrix> = (0..3).map(|_| random(&mut rng, 4, 4)).collect();
        let experts = mats.iter().map(linear_expert).collect();
        let layer = MoeLayer::from_parts(experts, Linear::new(&mut rng, 4, 3), 3, 0.03).unwrap();
        let x = random(&mut rng, 5, 4);
        let (y, _) = moe_forward(&layer, &x).unwrap();
        for t in 0..5 {
            let xt = Matrix::row_vector(x.row(t));
            let logits = xt.matmul(&layer.gate.weight).unwrap().add(&layer.gate.bias).unwrap();
            let p = softmax_rows(&logits);
            let mut want = Matrix::zeros(1, 4);
            for (i, a) in mats.iter().enumerate() {
                want = want.add(&xt.matmul(a).unwrap().scale(p.get(0, i))).unwrap();
            }
            assert!(Matrix::row_vector(y.row(t)).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn balance_loss_examples() {
        let uniform = RoutingStats {
            p: vec![0.25; 4],
            l: vec![0.25; 4],
            selections: vec![],
        };
        assert_eq!(balance_loss(&uniform, 1.0), 0.0);
        let skew = RoutingStats {
            p: vec![1.0, 0.0],
            l: vec![1.0, 0.0],
            selections: vec![],
        };
        assert!((balance_loss(&skew, 1.0) - 0.5).abs() < 1e-15);
        let base = balance_loss(&skew, 1.0);
        assert!((balance_loss(&skew, 0.03) - 0.03 * base).abs() < 1e-12);
        assert!((balance_loss(&skew, 0.06) - 2.0 * balance_loss(&skew, 0.03)).abs() < 1e-12);
    }

    #[test]
    fn tape_penalty_matches_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = MoeLayer::new(&mut rng, 4, 6, 4, 2, 0.03).unwrap();
        let x = random(&mut rng, 7, 4);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let out = layer.forward(&mut g, xv).unwrap();
        let pen = layer.balance_penalty(&mut g, &out).unwrap();
        let want = balance_loss(&out.stats, 0.03);
        assert!((g.value(pen).item().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn gradients_away_from_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = MoeLayer::new(&mut rng, 4, 6, 4, 2, 0.5).unwrap();
        let x = random(&mut rng, 6, 4);
        let target = random(&mut rng, 6, 4);
        let r = grad_check(&layer, &GradCheckOptions::default(), |m, g| {
            let xv = g.constant(x.clone());
            let out = m.forward(g, xv)?;
            let t = g.constant(target.clone());
            let d = g.sub(out.tokens, t)?;
            let sq = g.mul(d, d)?;
            let fit = g.sum(sq);
            let pen = m.balance_penalty(g, &out)?;
            g.add(fit, pen)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn bad_configs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(MoeLayer::new(&mut rng, 4, 4, 2, 3, 0.0).is_err());
        assert!(MoeLayer::new(&mut rng, 4, 4, 2, 0, 0.0).is_err());
        assert!(MoeLayer::new(&mut rng, 4, 4, 2, 1, -1.0).is_err());
        let layer = MoeLayer::new(&mut rng, 4, 4, 2, 1, 0.0).unwrap();
        assert!(route(&layer, &Matrix::zeros(3, 5)).is_err());
    }

    proptest! {
        #[test]
        fn routing_invariants(seed in 0u64..500, n in 1usize..12, e in 1usize..7, kk in 1usize..7) {
            let k = kk.min(e);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layer = MoeLayer::new(&mut rng, 3, 4, e, k, 0.03).unwrap();
            let x = random(&mut rng, n, 3);
            let stats = route(&layer, &x).unwrap();
            prop_assert!((stats.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((stats.l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(stats.selections.iter().all(|s| s.len() == k));
            prop_assert_eq!(&stats, &route(&layer, &x).unwrap());
            let loss = balance_loss(&stats, 0.03);
            prop_assert!(loss >= 0.0);

            // renormalised selected weights sum to one per token
            let logits = x.matmul(&layer.gate.weight).unwrap();
            for t in 0..n {
                let row: Vec<f64> = (0..e).map(|i| logits.get(t, i) + layer.gate.bias.get(0, i)).collect();
                let p = softmax_rows(&Matrix::row_vector(&row));
                let s: f64 = stats.selections[t].iter().map(|&i| p.get(0, i)).sum();
                let w: f64 = stats.selections[t].iter().map(|&i| p.get(0, i) / s).sum();
                prop_assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }
}
