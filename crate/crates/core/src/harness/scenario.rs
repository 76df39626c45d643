use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OccupancyGrid, PerceptionRange, RigidTransform2D};
use crate::metrics::Detection;
use crate::model::{GroundTruth, ModelConfig};
use crate::numerics::{glorot, Matrix};

pub const MIN_AGENTS: usize = 3;
pub const MAX_AGENTS: usize = 6;
/// Box of every synthetic vehicle, length × width in metres.
pub const AGENT_EXTENT: [f64; 2] = [4.5, 1.9];
/// Seconds between trajectory steps.
pub const STEP_S: f64 = 0.5;
/// Half lane width: lane centrelines sit this far from the road axis.
pub const LANE_OFFSET_M: f64 = 1.75;
/// Spacing of sampled lane centreline points.
pub const LANE_SPACING_M: f64 = 10.0;
/// Columns of a raw sensor feature row.
pub const SENSOR_FEATURES: usize = 10;
const SENSOR_SEED: u64 = 0x5e45_0a11;
const MIN_GAP_M: f64 = 7.0;

/// Which side of the link observes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Party {
    Ego,
    Infrastructure,
}

/// One ground-truth vehicle, in the ego frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtAgent {
    pub id: u64,
    pub center: [f64; 2],
    pub heading: f64,
    pub velocity: [f64; 2],
    /// Centres at `STEP_S, 2·STEP_S, …`.
    pub future: Vec<[f64; 2]>,
}

impl GtAgent {
    pub fn detection(&self) -> Detection {
        Detection::new(self.center, AGENT_EXTENT, self.heading, 1.0)
            .expect("synthetic boxes are valid")
            .with_track(self.id)
    }

    /// Box at future step `t`, heading unchanged.
    pub fn detection_at(&self, t: usize) -> Detection {
        Detection { center: self.future[t], ..self.detection() }
    }
}

/// A single-frame intersection scene. World frame: the intersection centre
/// is the origin, roads run along both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub difficulty: f64,
    /// Ego vehicle pose in the world.
    pub ego_pose: RigidTransform2D,
    /// Roadside unit pose in the world.
    pub infra_pose: RigidTransform2D,
    pub agents: Vec<GtAgent>,
    /// Lane centreline samples inside the ego range, ego frame.
    pub map_points: Vec<[f64; 2]>,
    /// Expert ego waypoints, ego frame.
    pub expert_plan: Vec<[f64; 2]>,
    pub ego_velocity: [f64; 2],
    /// Binary occupancy on the ego BEV grid.
    pub occupancy: OccupancyGrid,
    pub visible_to_ego: Vec<bool>,
    pub visible_to_infra: Vec<bool>,
}

/// Layout knobs taken from the model configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScenarioShape {
    pub future_steps: usize,
    pub plan_steps: usize,
    pub bev_height: usize,
    pub bev_width: usize,
}

impl ScenarioShape {
    pub fn of(cfg: &ModelConfig) -> Self {
        ScenarioShape {
            future_steps: cfg.future_steps,
            plan_steps: cfg.plan_steps,
            bev_height: cfg.bev_height,
            bev_width: cfg.bev_width,
        }
    }
}

impl Default for ScenarioShape {
    fn default() -> Self {
        Self::of(&ModelConfig::default())
    }
}

/// Scenario with the default layout (12 future steps, 6 plan steps, 8x8).
pub fn gen_scenario(seed: u64, difficulty: f64) -> Result<Scenario> {
    gen_scenario_with(seed, difficulty, ScenarioShape::default())
}

fn lane_point(lane: usize, s: f64) -> ([f64; 2], f64) {
    // travel direction per lane: east, west, north, south
    match lane {
        0 => ([s, -LANE_OFFSET_M], 0.0),
        1 => ([-s, LANE_OFFSET_M], std::f64::consts::PI),
        2 => ([LANE_OFFSET_M, s], std::f64::consts::FRAC_PI_2),
        _ => ([-LANE_OFFSET_M, -s], -std::f64::consts::FRAC_PI_2),
    }
}

/// Deterministic scene from `seed`. `difficulty ∈ [0, 1]` is the chance
/// that an agent is hidden from the ego; agents hidden from both parties
/// are made visible to the ego, and difficulty 0 hides nothing.
pub fn gen_scenario_with(seed: u64, difficulty: f64, shape: ScenarioShape) -> Result<Scenario> {
    if !(0.0..=1.0).contains(&difficulty) {
        return Err(Error::Config(format!("difficulty {difficulty} outside [0, 1]")));
    }
    if shape.plan_steps > shape.future_steps {
        return Err(Error::Config("plan horizon exceeds the ground-truth horizon".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let speed = rng.gen_range(4.0..9.0);
    let ego_pose = RigidTransform2D::new(
        rng.gen_range(-0.05..0.05),
        -rng.gen_range(15.0..30.0),
        -LANE_OFFSET_M,
    );
    let infra_pose = RigidTransform2D::new(
        std::f64::consts::PI + rng.gen_range(-0.3..0.3),
        rng.gen_range(8.0..14.0),
        rng.gen_range(8.0..14.0),
    );
    let to_ego = ego_pose.inverse();
    let ego_range = PerceptionRange::EGO;

    let n = rng.gen_range(MIN_AGENTS..=MAX_AGENTS);
    let mut placed: Vec<([f64; 2], f64, f64)> = Vec::with_capacity(n);
    let mut attempts = 0;
    while placed.len() < n {
        attempts += 1;
        let lane = rng.gen_range(0..4);
        let (pos, heading) = lane_point(lane, rng.gen_range(-40.0..40.0));
        let v = rng.gen_range(2.0..10.0);
        let local = to_ego.apply_point(pos);
        let inside = local[0].abs() < 46.0 && local[1].abs() < 46.0;
        let clear = local[0].hypot(local[1]) > MIN_GAP_M
            && placed.iter().all(|(p, _, _)| (p[0] - pos[0]).hypot(p[1] - pos[1]) > MIN_GAP_M);
        if inside && clear {
            placed.push((pos, heading, v));
        } else if attempts > 10_000 {
            return Err(Error::Contract("could not place agents".into()));
        }
    }

    let mut agents = Vec::with_capacity(n);
    let ego_heading = ego_pose.angle();
    for (i, &(pos, heading, v)) in placed.iter().enumerate() {
        let dir = [heading.cos(), heading.sin()];
        let future = (1..=shape.future_steps)
            .map(|t| {
                let d = v * STEP_S * t as f64;
                to_ego.apply_point([pos[0] + d * dir[0], pos[1] + d * dir[1]])
            })
            .collect();
        agents.push(GtAgent {
            id: i as u64 + 1,
            center: to_ego.apply_point(pos),
            heading: wrap(heading - ego_heading),
            velocity: to_ego.apply_vector([v * dir[0], v * dir[1]]),
            future,
        });
    }

    let mut map_points = Vec::new();
    for lane in 0..4 {
        let mut s = -50.0;
        while s <= 50.0 {
            let p = to_ego.apply_point(lane_point(lane, s).0);
            if ego_range.contains(p) {
                map_points.push(p);
            }
            s += LANE_SPACING_M;
        }
    }

    let from_ego_to_infra = infra_pose.inverse().compose(&ego_pose);
    let visible_to_infra: Vec<bool> = agents
        .iter()
        .map(|a| PerceptionRange::INFRASTRUCTURE.contains(from_ego_to_infra.apply_point(a.center)))
        .collect();
    let visible_to_ego: Vec<bool> = visible_to_infra
        .iter()
        .map(|&infra| {
            let hidden = rng.gen::<f64>() < difficulty;
            !hidden || !infra
        })
        .collect();

    let expert_plan = (1..=shape.plan_steps)
        .map(|t| [speed * STEP_S * t as f64, 0.0])
        .collect();

    let mut occupancy = OccupancyGrid::covering(&ego_range, shape.bev_height, shape.bev_width)?;
    for a in &agents {
        let d = a.detection();
        for p in std::iter::once(d.center).chain(d.corners()) {
            if let Some((r, c)) = occupancy.cell_of(p) {
                occupancy.set(r, c, 1.0);
            }
        }
    }

    Ok(Scenario {
        seed,
        difficulty,
        ego_pose,
        infra_pose,
        agents,
        map_points,
        expert_plan,
        ego_velocity: [speed, 0.0],
        occupancy,
        visible_to_ego,
        visible_to_infra,
    })
}

fn wrap(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let r = a.rem_euclid(t);
    if r > std::f64::consts::PI {
        r - t
    } else {
        r
    }
}

impl Scenario {
    /// Maps infrastructure-frame points into the ego frame.
    pub fn infra_to_ego(&self) -> RigidTransform2D {
        self.ego_pose.inverse().compose(&self.infra_pose)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("ego", &self.ego_pose), ("infrastructure", &self.infra_pose)] {
            if !p.is_valid(1e-9) {
                return Err(Error::Contract(format!("{name} pose is not a rigid transform")));
            }
        }
        let n = self.agents.len();
        if self.visible_to_ego.len() != n || self.visible_to_infra.len() != n {
            return Err(Error::Contract("visibility masks must cover every agent".into()));
        }
        if let Some(i) = (0..n).find(|&i| !self.visible_to_ego[i] && !self.visible_to_infra[i]) {
            return Err(Error::Contract(format!("agent {i} is visible to nobody")));
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> GroundTruth {
        GroundTruth {
            positions: self.agents.iter().map(|a| a.center).collect(),
            futures: self.agents.iter().map(|a| a.future.clone()).collect(),
            map_points: self.map_points.clone(),
            occupancy: self.occupancy.clone(),
            plan: self.expert_plan.clone(),
        }
    }

    /// Raw `rows × SENSOR_FEATURES` observations of `party` in its own
    /// frame: a self row, one row per visible agent, one per lane point in
    /// range.
    pub fn observations(&self, party: Party) -> Matrix {
        let (to_local, range, mask, v_self) = match party {
            Party::Ego => (RigidTransform2D::identity(), PerceptionRange::EGO, &self.visible_to_ego, self.ego_velocity),
            Party::Infrastructure => (
                self.infra_pose.inverse().compose(&self.ego_pose),
                PerceptionRange::INFRASTRUCTURE,
                &self.visible_to_infra,
                [0.0, 0.0],
            ),
        };
        let s = 51.2;
        let mut rows = vec![vec![0.0, 0.0, 1.0, 0.0, v_self[0] / 10.0, v_self[1] / 10.0, 0.0, 0.0, 0.0, 0.0]];
        for (a, _) in self.agents.iter().zip(mask).filter(|(_, &m)| m) {
            let p = to_local.apply_point(a.center);
            let v = to_local.apply_vector(a.velocity);
            let h = a.heading + to_local.angle();
            rows.push(vec![
                p[0] / s,
                p[1] / s,
                h.cos(),
                h.sin(),
                v[0] / 10.0,
                v[1] / 10.0,
                AGENT_EXTENT[0] / 5.0,
                AGENT_EXTENT[1] / 5.0,
                1.0,
                0.0,
            ]);
        }
        for &m in &self.map_points {
            let p = to_local.apply_point(m);
            if range.contains(p) {
                rows.push(vec![p[0] / s, p[1] / s, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
            }
        }
        Matrix::from_rows(&rows).expect("finite observations")
    }

    /// Observations of `party` projected to `dim` columns by a fixed random
    /// sensor projection shared by every run.
    pub fn sensor_tokens(&self, party: Party, dim: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(SENSOR_SEED);
        let w = glorot(&mut rng, SENSOR_FEATURES, dim);
        self.observations(party).matmul(&w).expect("sensor projection shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        for seed in 0..50 {
            let a = gen_scenario(seed, 0.5).unwrap();
            assert_eq!(a, gen_scenario(seed, 0.5).unwrap());
            assert!((MIN_AGENTS..=MAX_AGENTS).contains(&a.agents.len()));
            a.validate().unwrap();
            assert_eq!(a.expert_plan.len(), 6);
            assert!(a.agents.iter().all(|g| g.future.len() == 12));
            assert!(a.agents.iter().all(|g| PerceptionRange::EGO.contains(g.center)));
        }
    }

    #[test]
    fn zero_difficulty_hides_nothing() {
        for seed in 0..50 {
            let s = gen_scenario(seed, 0.0).unwrap();
            assert!(s.visible_to_ego.iter().all(|&v| v));
        }
        // full difficulty hides exactly the agents the roadside unit sees
        for seed in 0..50 {
            let s = gen_scenario(seed, 1.0).unwrap();
            for i in 0..s.agents.len() {
                assert_eq!(s.visible_to_ego[i], !s.visible_to_infra[i]);
            }
        }
        assert!(gen_scenario(0, 1.5).is_err());
    }

    #[test]
    fn frames_agree() {
        let s = gen_scenario(3, 0.0).unwrap();
        let obs = s.observations(Party::Infrastructure);
        let t = s.infra_to_ego();
        // infrastructure sees agents in its frame; mapping back recovers ego positions
        let seen: Vec<&GtAgent> = s.agents.iter().zip(&s.visible_to_infra).filter(|(_, &v)| v).map(|(a, _)| a).collect();
        for (k, a) in seen.iter().enumerate() {
            let row = obs.row(k + 1);
            let p = t.apply_point([row[0] * 51.2, row[1] * 51.2]);
            assert!((p[0] - a.center[0]).abs() < 1e-9 && (p[1] - a.center[1]).abs() < 1e-9);
        }
        assert_eq!(s.sensor_tokens(Party::Ego, 16).shape(), (s.observations(Party::Ego).rows(), 16));
    }

    #[test]
    fn occupancy_marks_agents() {
        let s = gen_scenario(7, 0.0).unwrap();
        for a in &s.agents {
            let (r, c) = s.occupancy.cell_of(a.center).unwrap();
            assert!(s.occupancy.is_set(r, c));
        }
    }
}
