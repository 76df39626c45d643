use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shapes and scales of one agent's query pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Query / token width `D`.
    pub dim: usize,
    pub heads: usize,
    /// Hidden width of every perceptron block.
    pub ffn_hidden: usize,
    pub experts: usize,
    pub top_k: usize,
    pub lambda: f64,
    /// Use a sparse MoE in place of the encoder feed-forward blocks.
    pub moe_encoder: bool,
    /// Use a sparse MoE in place of the motion decoder feed-forward blocks.
    pub moe_decoder: bool,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub bev_height: usize,
    pub bev_width: usize,
    pub n_track: usize,
    pub n_map: usize,
    /// Fused tracks (by score) handed to the motion decoder.
    pub n_motion: usize,
    pub modes: usize,
    pub future_steps: usize,
    pub plan_steps: usize,
    /// Metres per unit for reference points fed to embeddings and losses.
    pub position_scale: f64,
    /// Metres per unit of a decoded per-step offset.
    pub step_scale: f64,
    /// Metres per unit of trajectory and plan error in the loss.
    pub trajectory_scale: f64,
    /// Occupancy threshold τ.
    pub occ_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 2,
            ffn_hidden: 64,
            experts: 8,
            top_k: 2,
            lambda: 0.03,
            moe_encoder: true,
            moe_decoder: true,
            encoder_layers: 6,
            decoder_layers: 6,
            bev_height: 8,
            bev_width: 8,
            n_track: 15,
            n_map: 3,
            n_motion: 5,
            modes: 6,
            future_steps: 12,
            plan_steps: 6,
            position_scale: 51.2,
            step_scale: 2.0,
            trajectory_scale: 10.0,
            occ_threshold: 0.1,
        }
    }
}

impl ModelConfig {
    /// The reference micro scene: 8x8 BEV, D=16, E=4, k=2.
    pub fn micro() -> Self {
        ModelConfig {
            dim: 16,
            heads: 2,
            ffn_hidden: 32,
            experts: 4,
            top_k: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            n_track: 8,
            n_map: 3,
            n_motion: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.experts == 0 || self.top_k == 0 || self.top_k > self.experts {
            return fail(format!("need 1 <= k <= E, got k={}, E={}", self.top_k, self.experts));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda {} must be >= 0", self.lambda));
        }
        if self.bev_height < 2 || self.bev_width < 2 {
            return fail("BEV grid must be at least 2x2".into());
        }
        if self.n_track == 0 || self.n_map == 0 || self.n_motion == 0 {
            return fail("query counts must be positive".into());
        }
        if self.modes == 0 || self.future_steps == 0 || self.plan_steps == 0 {
            return fail("modes and horizons must be positive".into());
        }
        for (name, v) in [
            ("position_scale", self.position_scale),
            ("step_scale", self.step_scale),
            ("trajectory_scale", self.trajectory_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.occ_threshold) {
            return fail("occ_threshold must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn bev_tokens(&self) -> usize {
        self.bev_height * self.bev_width
    }
}
