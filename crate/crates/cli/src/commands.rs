use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use v2x_coop::comm::{self, constrain, read_frames, write_frames, ChannelBudget};
use v2x_coop::geometry::OccupancyGrid;
use v2x_coop::harness::{
    self, gen_scenario_with, infra_messages, run_pipeline_timed, train, ModelParams, RunConfig, ScenarioShape, Toggles,
};
use v2x_coop::metrics::{
    default_thresholds, grid_iou, map_score, motion_errors, planning_errors, Detection, MatchCriterion,
    MetricsReport, EGO_EXTENT, FAR_RANGE_M, NEAR_RANGE_M,
};
use v2x_coop::model::checkpoint::{read_checkpoint, write_checkpoint};
use v2x_coop::model::{ModelConfig, TrajectorySet};
use v2x_coop::numerics::GradCheckOptions;

pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl From<v2x_coop::Error> for CliError {
    fn from(e: v2x_coop::Error) -> Self {
        CliError { kind: e.kind(), message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError { kind: "io", message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError { kind: "parse", message: e.to_string() }
    }
}

fn config_error(message: impl Into<String>) -> CliError {
    CliError { kind: "config", message: message.into() }
}

type Outcome = Result<Value, CliError>;

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError { kind: "io", message: format!("{}: {e}", path.display()) })?;
    serde_json::from_str(&text).map_err(|e| CliError { kind: "parse", message: format!("{}: {e}", path.display()) })
}

fn load_config(path: Option<&Path>, fallback: RunConfig) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => fallback,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<String, CliError> {
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path.display().to_string())
}

fn checkpoint<M: v2x_coop::numerics::Parameterized>(dir: &Path, name: &str, model: &M) -> Result<String, CliError> {
    let path = dir.join(name);
    write_checkpoint(model, BufWriter::new(fs::File::create(&path)?))?;
    Ok(path.display().to_string())
}

pub fn simulate(seed: u64, config: Option<&Path>, out: &Path, ego_ckpt: Option<&Path>) -> Outcome {
    let cfg = RunConfig { seed, ..load_config(config, RunConfig::default())? };
    let mc = cfg.model_config();
    let mut params = ModelParams::new(seed, &mc)?;
    if let Some(p) = ego_ckpt {
        read_checkpoint(&mut params.ego, fs::File::open(p)?)?;
    }
    fs::create_dir_all(out)?;

    let mut seeds = cfg.scenario_seeds();
    seeds.sort_unstable();
    let mut scenes = Vec::new();
    let mut reports = Vec::new();
    let mut total = harness::StageTimings::default();
    for &s in &seeds {
        let scn = gen_scenario_with(s, cfg.difficulty, ScenarioShape::of(&mc))?;
        let (run, times) = run_pipeline_timed(&scn, &cfg, &params)?;
        total.infra_ms += times.infra_ms;
        total.channel_ms += times.channel_ms;
        total.ego_ms += times.ego_ms;
        total.metrics_ms += times.metrics_ms;
        scenes.push(json!({
            "seed": s,
            "report": run.report,
            "loss": run.loss,
            "delivered": run.delivered,
            "timings_ms": times,
        }));
        reports.push(run.report);
    }
    let mean = MetricsReport::mean(&reports)?;

    let mut csv = String::new();
    {
        let mut rows = vec![std::iter::once("scene".to_string()).chain(mean.csv_header()).collect::<Vec<_>>()];
        for (s, r) in seeds.iter().zip(&reports) {
            rows.push(std::iter::once(s.to_string()).chain(r.csv_row()).collect());
        }
        rows.push(std::iter::once("mean".to_string()).chain(mean.csv_row()).collect());
        for row in rows {
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
    }

    let first = gen_scenario_with(seeds[0], cfg.difficulty, ScenarioShape::of(&mc))?;
    let sent = infra_messages(&first, &cfg.toggles, &params.infra, &mc)?;
    let delivered = constrain(&sent, &cfg.budget)?;

    let files = vec![
        write(out, "config.json", serde_json::to_string_pretty(&cfg)?)?,
        write(out, "report.json", mean.to_json()?)?,
        write(out, "report.csv", csv)?,
        write(out, "scenes.json", serde_json::to_string_pretty(&scenes)?)?,
        write(out, "messages.bin", write_frames(&delivered))?,
        checkpoint(out, "ego.ckpt", &params.ego)?,
        checkpoint(out, "infra.ckpt", &params.infra)?,
    ];
    Ok(json!({ "report": mean, "scenes": seeds.len(), "timings_ms": total, "files": files }))
}

/// A grid entry: explicit flags or the 4-bit code (P, M, Enc, Dec).
#[derive(Deserialize)]
#[serde(untagged)]
enum GridEntry {
    Bits(u8),
    Flags(Toggles),
}

pub fn ablate(grid: &Path, config: Option<&Path>, out: Option<&Path>) -> Outcome {
    let entries: Vec<GridEntry> = read_json(grid)?;
    let toggles = entries
        .into_iter()
        .map(|e| match e {
            GridEntry::Bits(b) if b < 16 => Ok(Toggles::from_bits(b)),
            GridEntry::Bits(b) => Err(config_error(format!("grid code {b} is not a 4-bit value"))),
            GridEntry::Flags(t) => Ok(t),
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = load_config(config, RunConfig::default())?;
    let table = harness::ablate(&cfg, &toggles)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write(dir, "ablation.csv", table.to_csv()?)?;
        write(dir, "ablation.json", table.to_json()?)?;
    }
    Ok(serde_json::to_value(&table)?)
}

fn parse_budget(s: &str) -> Result<Option<f64>, CliError> {
    let t = s.trim();
    if matches!(t.to_ascii_lowercase().as_str(), "inf" | "unlimited" | "none") {
        return Ok(None);
    }
    t.parse::<f64>()
        .map(Some)
        .map_err(|_| config_error(format!("budget {t:?} is neither a number nor inf")))
}

pub fn sweep(budgets: &[String], config: Option<&Path>, out: Option<&Path>) -> Outcome {
    let caps = if budgets.is_empty() {
        harness::default_budgets()
    } else {
        budgets.iter().map(|b| parse_budget(b)).collect::<Result<Vec<_>, _>>()?
    };
    let cfg = load_config(config, RunConfig::default())?;
    let curve = harness::bandwidth_sweep(&caps, &cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write(dir, "sweep.csv", curve.to_csv()?)?;
        write(dir, "sweep.json", curve.to_json()?)?;
    }
    Ok(serde_json::to_value(&curve)?)
}

pub fn gradcheck(eps: f64, coords: usize, seed: u64, tol: f64) -> Outcome {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(config_error(format!("eps {eps} outside (0, 1e-3]")));
    }
    let opts = GradCheckOptions { eps, max_coords_per_tensor: Some(coords.max(1)), seed };
    let cases = harness::gradcheck_suite(&opts)?;
    let worst = cases.iter().map(|c| c.report.max_rel_error).fold(0.0, f64::max);
    let seconds: f64 = cases.iter().map(|c| c.seconds).sum();
    Ok(json!({
        "eps": eps,
        "tolerance": tol,
        "max_rel_error": worst,
        "pass": worst < tol,
        "seconds": seconds,
        "cases": cases,
    }))
}

pub fn train_smoke(steps: usize, lr: f64, seed: u64, config: Option<&Path>, out: Option<&Path>) -> Outcome {
    let micro = RunConfig { model: ModelConfig::micro(), ..RunConfig::default() };
    let cfg = RunConfig { seed, ..load_config(config, micro)? };
    let mc = cfg.model_config();
    let scn = gen_scenario_with(seed, cfg.difficulty, ScenarioShape::of(&mc))?;
    let mut params = ModelParams::new(seed, &mc)?;
    let rep = train(&mut params, &scn, &cfg, steps, lr)?;
    let mut files = Vec::new();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut csv = String::from("step,track,map,occ,mot,plan,moe,total\n");
        for (i, l) in rep.history.iter().chain(std::iter::once(&rep.final_loss)).enumerate() {
            let cells: Vec<String> = l.terms().iter().chain(std::iter::once(&l.total)).map(f64::to_string).collect();
            csv.push_str(&format!("{i},{}\n", cells.join(",")));
        }
        files.push(write(dir, "history.csv", csv)?);
        files.push(write(dir, "train.json", serde_json::to_string_pretty(&rep)?)?);
        files.push(checkpoint(dir, "ego.ckpt", &params.ego)?);
    }
    Ok(json!({
        "steps": steps,
        "lr": lr,
        "initial": rep.history.first(),
        "final": rep.final_loss,
        "reduction": rep.reduction(),
        "min_load": rep.min_load(),
        "load_entropy": rep.load_entropy(),
        "files": files,
    }))
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Criterion {
    BevIou,
    CenterDistance,
}

/// Prediction file of the `metrics` subcommand. Every section is optional.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct PredFile {
    detections: Option<Vec<Detection>>,
    trajectories: Option<TrajectorySet>,
    plan: Option<Vec<[f64; 2]>>,
    occupancy: Option<OccupancyGrid>,
}

/// Ground-truth file of the `metrics` subcommand.
#[derive(Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
struct GtFile {
    detections: Option<Vec<Detection>>,
    /// One future per predicted agent.
    futures: Option<Vec<Vec<[f64; 2]>>>,
    plan: Option<Vec<[f64; 2]>>,
    /// Obstacles per plan step.
    obstacles: Option<Vec<Vec<Detection>>>,
    occupancy: Option<OccupancyGrid>,
}

/// Re-validates a grid that bypassed its constructor during parsing.
fn checked_grid(g: OccupancyGrid) -> Result<OccupancyGrid, CliError> {
    Ok(OccupancyGrid::from_probs(g.height(), g.width(), g.cell_size(), g.origin(), g.probs().to_vec())?)
}

pub fn metrics(pred: &Path, gt: &Path, criterion: Criterion, miss: f64) -> Outcome {
    let p: PredFile = read_json(pred)?;
    let g: GtFile = read_json(gt)?;
    let mut out = serde_json::Map::new();

    if let (Some(pd), Some(gd)) = (&p.detections, &g.detections) {
        let (crit, thresholds) = match criterion {
            Criterion::BevIou => (MatchCriterion::BevIou, default_thresholds(11)),
            Criterion::CenterDistance => (MatchCriterion::CenterDistance, harness::DETECTION_THRESHOLDS_M.to_vec()),
        };
        out.insert("mAP".into(), json!(map_score(pd, gd, crit, &thresholds)?));
    }
    if let (Some(t), Some(f)) = (p.trajectories, &g.futures) {
        let t = TrajectorySet::new(t.agents, t.modes, t.steps, t.points, t.scores)?;
        out.insert("motion".into(), serde_json::to_value(motion_errors(&t, f, miss)?)?);
    }
    if let (Some(plan), Some(expert)) = (&p.plan, &g.plan) {
        let obstacles = g.obstacles.clone().unwrap_or_default();
        out.insert("planning".into(), serde_json::to_value(planning_errors(plan, expert, &obstacles, EGO_EXTENT)?)?);
    }
    if let (Some(po), Some(go)) = (p.occupancy, g.occupancy) {
        let (po, go) = (checked_grid(po)?, checked_grid(go)?);
        out.insert(
            "occupancy_iou".into(),
            json!({ "near": grid_iou(&po, &go, NEAR_RANGE_M)?, "far": grid_iou(&po, &go, FAR_RANGE_M)? }),
        );
    }
    if out.is_empty() {
        return Err(config_error("prediction and ground-truth files share no section to evaluate"));
    }
    Ok(Value::Object(out))
}

pub fn bps(messages: &Path, frequency_hz: f64, cap: Option<f64>) -> Outcome {
    let bytes = fs::read(messages)?;
    let msgs = read_frames(&bytes)?;
    let rows: Vec<Value> = msgs
        .iter()
        .map(|m| {
            json!({
                "kind": m.kind,
                "sender": m.sender,
                "timestamp_ms": m.timestamp_ms,
                "count": m.count(),
                "payload_bytes": m.payload_bytes(),
                "wire_bytes": m.bytes().len(),
            })
        })
        .collect();
    let mut out = json!({
        "frequency_hz": frequency_hz,
        "bps": comm::bps(&msgs, frequency_hz)?,
        "messages": rows,
    });
    if let Some(c) = cap {
        let fitted = constrain(&msgs, &ChannelBudget::new(Some(c), frequency_hz)?)?;
        out["cap_bps"] = json!(c);
        out["constrained_bps"] = json!(comm::bps(&fitted, frequency_hz)?);
    }
    Ok(out)
}
