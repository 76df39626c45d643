use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::matrix::Matrix;
use super::params::Parameterized;
use crate::error::{Error, Result};

/// Uniform Glorot initialisation.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("glorot shape")
}

/// Unit-variance uniform initialisation for learnable embedding tables.
pub fn embedding<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let limit = 3f64.sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Matrix::from_vec(rows, cols, data).expect("embedding shape")
}

/// Affine map `x·W + b` with `W: in×out` and `b: 1×out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Linear {
            weight: glorot(rng, input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Two-layer feed-forward map `relu(x·W₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptronBlock {
    pub hidden: Linear,
    pub output: Linear,
}

impl PerceptronBlock {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        PerceptronBlock {
            hidden: Linear::new(rng, input, hidden),
            output: Linear::new(rng, hidden, output),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        PerceptronBlock {
            hidden: Linear::zeros(input, hidden),
            output: Linear::zeros(hidden, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.input_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.output_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.output.output_dim()
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.input_dim() {
            return Err(Error::dim(
                "perceptron_forward",
                format!("input has {} cols, block expects {}", g.shape(x).1, self.input_dim()),
            ));
        }
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

impl Parameterized for PerceptronBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        self.hidden.visit(f);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Evaluates a perceptron block on `x` row by row.
pub fn perceptron_forward(block: &PerceptronBlock, x: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = block.forward(&mut g, xv)?;
    Ok(g.value(y).clone())
}

/// Multi-head scaled dot-product attention without projection biases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBlock {
    heads: usize,
    /// Per-head query projections, each `D × D/heads`.
    pub query: Vec<Matrix>,
    pub key: Vec<Matrix>,
    pub value: Vec<Matrix>,
    /// `D × D`.
    pub output: Matrix,
}

impl AttentionBlock {
    pub fn new<R: Rng>(rng: &mut R, model_dim: usize, heads: usize) -> Result<Self> {
        let head_dim = Self::head_dim_for(model_dim, heads)?;
        let proj = |rng: &mut R| -> Vec<Matrix> {
            (0..heads).map(|_| glorot(rng, model_dim, head_dim)).collect()
        };
        let query = proj(rng);
        let key = proj(rng);
        let value = proj(rng);
        Ok(AttentionBlock {
            heads,
            query,
            key,
            value,
            output: glorot(rng, model_dim, model_dim),
        })
    }

    /// Builds a block from explicit per-head weights.
    pub fn from_weights(
        query: Vec<Matrix>,
        key: Vec<Matrix>,
        value: Vec<Matrix>,
        output: Matrix,
    ) -> Result<Self> {
        let heads = query.len();
        let model_dim = output.rows();
        let head_dim = Self::head_dim_for(model_dim, heads)?;
        let ok = key.len() == heads
            && value.len() == heads
            && output.cols() == model_dim
            && query
                .iter()
                .chain(&key)
                .chain(&value)
                .all(|m| m.shape() == (model_dim, head_dim));
        if !ok {
            return Err(Error::dim("AttentionBlock", "inconsistent projection shapes"));
        }
        Ok(AttentionBlock {
            heads,
            query,
            key,
            value,
            output,
        })
    }

    fn head_dim_for(model_dim: usize, heads: usize) -> Result<usize> {
        if heads == 0 || model_dim == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {model_dim} not divisible into {heads} heads"
            )));
        }
        Ok(model_dim / heads)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn model_dim(&self) -> usize {
        self.output.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim() / self.heads
    }

    /// `queries` attend over `context`; returns one row per query.
    pub fn attend<'p>(&'p self, g: &mut Graph<'p>, queries: Var, context: Var) -> Result<Var> {
        Ok(self.attend_with_maps(g, queries, context)?.0)
    }

    pub fn self_attend<'p>(&'p self, g: &mut Graph<'p>, tokens: Var) -> Result<Var> {
        self.attend(g, tokens, tokens)
    }

    fn attend_with_maps<'p>(
        &'p self,
        g: &mut Graph<'p>,
        queries: Var,
        context: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.model_dim();
        for (name, v) in [("queries", queries), ("context", context)] {
            if g.shape(v).1 != d {
                return Err(Error::dim(
                    "attention",
                    format!("{name} have {} cols, model dim is {d}", g.shape(v).1),
                ));
            }
        }
        if g.shape(context).0 == 0 {
            return Err(Error::dim("attention", "empty context"));
        }
        let scale = 1.0 / (self.head_dim() as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let wq = g.param(&self.query[h]);
            let wk = g.param(&self.key[h]);
            let wv = g.param(&self.value[h]);
            let q = g.matmul(queries, wq)?;
            let k = g.matmul(context, wk)?;
            let v = g.matmul(context, wv)?;
            let logits = g.matmul_nt(q, k)?;
            let logits = g.scale(logits, scale);
            let attn = g.softmax_rows(logits);
            maps.push(attn);
            heads.push(g.matmul_exact(attn, v)?);
        }
        let cat = g.concat_cols(&heads)?;
        let wo = g.param(&self.output);
        Ok((g.matmul(cat, wo)?, maps))
    }

    /// Per-head attention maps (rows = queries, cols = context rows).
    pub fn attention_maps(&self, queries: &Matrix, context: &Matrix) -> Result<Vec<Matrix>> {
        let mut g = Graph::new();
        let q = g.constant(queries.clone());
        let c = g.constant(context.clone());
        let (_, maps) = self.attend_with_maps(&mut g, q, c)?;
        Ok(maps.into_iter().map(|m| g.value(m).clone()).collect())
    }
}

impl Parameterized for AttentionBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Matrix)) {
        for h in 0..self.heads {
            f(&self.query[h]);
            f(&self.key[h]);
            f(&self.value[h]);
        }
        f(&self.output);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Matrix)) {
        for h in 0..self.heads {
            f(&mut self.query[h]);
            f(&mut self.key[h]);
            f(&mut self.value[h]);
        }
        f(&mut self.output);
    }
}

/// Multi-head self-attention over the rows of `tokens`.
pub fn mhsa(block: &AttentionBlock, tokens: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let t = g.constant(tokens.clone());
    let y = block.self_attend(&mut g, t)?;
    Ok(g.value(y).clone())
}

/// Multi-head cross-attention: `queries` attend over `context`.
pub fn mhca(block: &AttentionBlock, queries: &Matrix, context: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let c = g.constant(context.clone());
    let y = block.attend(&mut g, q, c)?;
    Ok(g.value(y).clone())
}
