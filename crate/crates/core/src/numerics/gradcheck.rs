use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::Parameterized;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckOptions {
    /// Central-difference step, in `(0, 1e-3]`.
    pub eps: f64,
    /// Check at most this many coordinates per tensor (chosen by `seed`).
    /// `None` checks every coordinate.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstCoordinate {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
}

fn swap_coordinate<M: Parameterized>(model: &mut M, tensor: usize, index: usize, value: f64) -> f64 {
    let mut t = 0;
    let mut old = f64::NAN;
    model.visit_mut(&mut |m| {
        if t == tensor {
            old = m.data()[index];
            m.data_mut()[index] = value;
        }
        t += 1;
    });
    old
}

/// Compares tape gradients of the scalar built by `f` against central finite
/// differences on the parameters of `model`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<M, F>(model: &M, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    M: Parameterized + Clone,
    F: for<'p> Fn(&'p M, &mut Graph<'p>) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-3) {
        return Err(Error::Contract(format!("eps {} outside (0, 1e-3]", opts.eps)));
    }
    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(m, &mut g)?;
        let v = g.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::new();
        g.register(model);
        let loss = f(model, &mut g)?;
        let v = g.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v}")));
        }
        let grads = g.backward(loss)?;
        g.param_grads(&grads, model)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.data().len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(k) if k < n => {
                let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let orig = swap_coordinate(&mut probe, t, idx, f64::NAN);
            swap_coordinate(&mut probe, t, idx, orig + opts.eps);
            let plus = eval(&probe)?;
            swap_coordinate(&mut probe, t, idx, orig - opts.eps);
            let minus = eval(&probe)?;
            swap_coordinate(&mut probe, t, idx, orig);

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(WorstCoordinate {
                    tensor: t,
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{AttentionBlock, Linear, Matrix, PerceptronBlock};
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        let x = random(&mut rng, 2, 3);
        let r = grad_check(&w, &GradCheckOptions::default(), |w, g| {
            let xv = g.constant(x.clone());
            let wv = g.param(w);
            let y = g.matmul(xv, wv)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert_eq!(r.coordinates, 12);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn perceptron_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = PerceptronBlock::new(&mut rng, 4, 6, 3);
        let x = random(&mut rng, 5, 4);
        let target = random(&mut rng, 5, 3);
        let r = grad_check(&block, &GradCheckOptions::default(), |b, g| {
            let xv = g.constant(x.clone());
            let y = b.forward(g, xv)?;
            let t = g.constant(target.clone());
            let d = g.sub(y, t)?;
            let sq = g.mul(d, d)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let block = AttentionBlock::new(&mut rng, 6, 2).unwrap();
        let q = random(&mut rng, 3, 6);
        let c = random(&mut rng, 4, 6);
        let w = random(&mut rng, 3, 6);
        let r = grad_check(&block, &GradCheckOptions::default(), |b, g| {
            let qv = g.constant(q.clone());
            let cv = g.constant(c.clone());
            let y = b.attend(g, qv, cv)?;
            let s = b.self_attend(g, y)?;
            let wv = g.constant(w.clone());
            let p = g.mul(s, wv)?;
            let p = g.tanh(p);
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn bad_eps_and_nan_loss_are_rejected() {
        let lin = Linear::zeros(1, 1);
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        assert!(matches!(
            grad_check(&lin, &opts, |l, g| Ok(g.param(&l.weight))),
            Err(Error::Contract(_))
        ));
        let res = grad_check(&lin, &GradCheckOptions::default(), |_, g| {
            let c = g.constant(Matrix::scalar(0.0));
            let z = g.constant(Matrix::scalar(0.0));
            g.div(c, z)
        });
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn sampling_limits_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = PerceptronBlock::new(&mut rng, 8, 8, 8);
        let x = random(&mut rng, 2, 8);
        let opts = GradCheckOptions {
            max_coords_per_tensor: Some(3),
            ..Default::default()
        };
        let r = grad_check(&block, &opts, |b, g| {
            let xv = g.constant(x.clone());
            let y = b.forward(g, xv)?;
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        })
        .unwrap();
        // 8x8 weights are sampled, 1x8 biases too
        assert_eq!(r.coordinates, 4 * 3);
    }
}
