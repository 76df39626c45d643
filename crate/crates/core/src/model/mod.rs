//! Per-agent query pipeline: MoE-BEV encoder, perception heads, motion
//! decoder, planner and the joint loss.

mod agent;
pub mod checkpoint;
mod config;
mod encoder;
mod heads;
mod loss;
mod motion;
mod planner;
mod types;

pub use agent::{AgentModel, Perception};
pub use config::ModelConfig;
pub use encoder::{encoder_layer, run_encoder, EncoderLayer, FeedForward, MoeRecord};
pub use heads::{occupancy_from_probs, perception_heads, DecodedQueries, HeadOutputs, PerceptionHeads, QueryHead};
pub use loss::{joint_loss, joint_loss_vars, GroundTruth, LossInputs, LossVars, ModelOutputs};
pub use motion::{motion_decoder, DecoderLayer, MotionDecoder, MotionOutputs};
pub use planner::{planner_head, waypoints, Planner};
pub use types::{BevState, LossBreakdown, QueryKind, QuerySet, QueryVars, TrajectorySet};
