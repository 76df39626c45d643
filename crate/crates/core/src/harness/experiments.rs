use serde::{Deserialize, Serialize};

use super::pipeline::{run_pipeline, ModelParams, RunConfig, Toggles};
use super::scenario::{gen_scenario_with, ScenarioShape};
use crate::comm::ChannelBudget;
use crate::error::{Error, Result};
use crate::metrics::{csv_err, MetricsReport};

/// Runs `cfg` over its scenario batch and averages the reports. Scenes are
/// reduced in seed order.
pub fn run_batch(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let mc = cfg.model_config();
    let params = ModelParams::new(cfg.seed, &mc)?;
    let mut seeds = cfg.scenario_seeds();
    seeds.sort_unstable();
    let reports = seeds
        .iter()
        .map(|&s| {
            let scn = gen_scenario_with(s, cfg.difficulty, ScenarioShape::of(&mc))?;
            Ok(run_pipeline(&scn, cfg, &params)?.report)
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::mean(&reports)
}

/// Column set of the ablation table.
pub const ABLATION_COLUMNS: [&str; 12] = [
    "P-Level", "M-Level", "Enc", "Dec", "mAP", "AMOTA", "minADE", "L2-1s", "L2-2s", "L2-3s", "L2-Avg",
    "Collision-Avg",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn cells(&self) -> Vec<String> {
        let t = &self.toggles;
        let mark = |b: bool| if b { "x" } else { "" }.to_string();
        let r = &self.report;
        let mut out = vec![
            mark(t.perception_fusion),
            mark(t.prediction_fusion),
            mark(t.moe_encoder),
            mark(t.moe_decoder),
            r.mean_ap.to_string(),
            r.amota.to_string(),
            r.min_ade.map(|v| v.to_string()).unwrap_or_default(),
        ];
        out.extend(r.l2.iter().map(|v| v.to_string()));
        out.push(r.l2_avg.to_string());
        out.push(r.collision_avg.to_string());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(ABLATION_COLUMNS).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.cells()).map_err(csv_err)?;
        }
        finish(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
}

/// One row per toggle combination, in `grid` order, each averaged over the
/// batch of `base`.
pub fn ablate(base: &RunConfig, grid: &[Toggles]) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid must not be empty".into()));
    }
    for (i, t) in grid.iter().enumerate() {
        if grid[..i].contains(t) {
            return Err(Error::Config(format!("duplicate ablation entry {t:?}")));
        }
    }
    let rows = grid
        .iter()
        .map(|&toggles| {
            let cfg = RunConfig { toggles, ..base.clone() };
            Ok(AblationRow { toggles, report: run_batch(&cfg)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Cap in bytes per second; `None` is unlimited.
    pub budget_bps: Option<f64>,
    pub realized_bps: f64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
}

impl SweepCurve {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let Some(first) = self.points.first() else {
            return finish(w);
        };
        let mut header = vec!["budget".to_string(), "realized".to_string()];
        header.extend(first.report.csv_header());
        w.write_record(header).map_err(csv_err)?;
        for p in &self.points {
            let mut row = vec![
                p.budget_bps.map_or("inf".to_string(), |b| b.to_string()),
                p.realized_bps.to_string(),
            ];
            row.extend(p.report.csv_row());
            w.write_record(row).map_err(csv_err)?;
        }
        finish(w)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Budgets spanning nothing to everything for the default model.
pub fn default_budgets() -> Vec<Option<f64>> {
    vec![Some(0.0), Some(1e3), Some(2e3), Some(4e3), Some(8e3), Some(1.6e4), None]
}

/// One batch run per budget. Budgets must be ascending with the unlimited
/// budget, if any, last.
pub fn bandwidth_sweep(budgets: &[Option<f64>], cfg: &RunConfig) -> Result<SweepCurve> {
    if budgets.is_empty() {
        return Err(Error::Config("sweep needs at least one budget".into()));
    }
    let key = |b: &Option<f64>| b.unwrap_or(f64::INFINITY);
    if budgets.windows(2).any(|w| key(&w[0]) > key(&w[1])) {
        return Err(Error::Config("budgets must be ascending".into()));
    }
    let points = budgets
        .iter()
        .map(|&b| {
            let budget = ChannelBudget::new(b, cfg.budget.frequency_hz)?;
            let report = run_batch(&RunConfig { budget, ..cfg.clone() })?;
            Ok(SweepPoint { budget_bps: b, realized_bps: report.bps, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepCurve { points })
}
