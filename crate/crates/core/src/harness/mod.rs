//! Synthetic intersection scenes, the cooperative ego/roadside pipeline,
//! ablations over the fusion and MoE toggles, bandwidth sweeps, the
//! gradient-descent smoke loop and the gradient-check suite.

mod checks;
mod experiments;
mod pipeline;
mod scenario;
mod train;

pub use checks::{gradcheck_suite, GradCheckCase};
pub use experiments::{
    ablate, bandwidth_sweep, default_budgets, run_batch, AblationRow, AblationTable, SweepCurve, SweepPoint,
    ABLATION_COLUMNS,
};
pub use pipeline::{
    detections, ego_forward, evaluate, infra_messages, run_pipeline, run_pipeline_timed, run_received, run_single_agent,
    EgoStack, EgoTape, ModelParams, PipelineRun, Received, RunConfig, StageTimings, Toggles, AMOTA_POINTS, DETECTION_SCORE,
    DETECTION_THRESHOLDS_M, EGO_AGENT, FRAME_TIMESTAMP_MS, INFRA_AGENT, MAP_CLASS,
};
pub use scenario::{
    gen_scenario, gen_scenario_with, GtAgent, Party, Scenario, ScenarioShape, AGENT_EXTENT, MAX_AGENTS,
    MIN_AGENTS, SENSOR_FEATURES, STEP_S,
};
pub use train::{train, train_smoke, TrainReport};
