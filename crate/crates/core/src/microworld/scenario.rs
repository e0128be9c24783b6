use super::geometry::{wrap_angle, OrientedRect, Polygon, Polyline, Vec2};
use crate::error::{CoreError, Result};
use crate::rng::keyed_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Vehicle body half-extents shared by ego and agents.
pub const EGO_HALF_LENGTH: f64 = 2.0;
pub const EGO_HALF_WIDTH: f64 = 0.9;
pub const LANE_WIDTH: f64 = 3.5;
/// Hard cap used by the Trajectory displacement invariant.
pub const V_MAX: f64 = 15.0;

const CRUISE_SPEED: f64 = 8.0;
const MAX_ACCEL: f64 = 4.0;
const TTC_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Pose { x, y, heading: wrap_angle(heading) }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Future poses sampled at t = i·dt for i in 1..=T.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, dt: f64) -> Result<Self> {
        if poses.len() < 2 {
            return Err(CoreError::Contract(format!(
                "trajectory needs at least 2 poses, got {}",
                poses.len()
            )));
        }
        if dt <= 0.0 {
            return Err(CoreError::Contract(format!("trajectory dt must be positive, got {dt}")));
        }
        for w in poses.windows(2) {
            let d = w[0].position().dist(w[1].position());
            if d > V_MAX * dt + 1e-9 {
                return Err(CoreError::Contract(format!(
                    "displacement {d:.3} exceeds v_max*dt = {}",
                    V_MAX * dt
                )));
            }
        }
        Ok(Trajectory { poses, dt })
    }

    pub fn horizon(&self) -> usize {
        self.poses.len()
    }

    /// Flatten (x, y) waypoints; used for clustering.
    pub fn flat_xy(&self) -> Vec<f64> {
        self.poses.iter().flat_map(|p| [p.x, p.y]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Left,
    Straight,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoStatus {
    pub velocity: f64,
    pub acceleration: f64,
    pub command: Command,
}

/// Traffic signal guarding a stop line on the ego route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub position: Vec2,
    /// Arc length along the ego route at which the stop line sits.
    pub stop_line_s: f64,
    /// Red phase windows as (start, end) seconds; green elsewhere.
    pub red_windows: Vec<(f64, f64)>,
}

impl Signal {
    pub fn is_red(&self, t: f64) -> bool {
        self.red_windows.iter().any(|(a, b)| t >= *a && t < *b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub init_pose: Pose,
    pub speed: f64,
    pub route: Polyline,
    pub half_length: f64,
    pub half_width: f64,
}

impl Agent {
    pub fn pose_at(&self, t: f64) -> Pose {
        let s0 = self.route.project(self.init_pose.position()).0;
        let s = s0 + self.speed * t.max(0.0);
        let p = self.route.point_at(s);
        let heading = if self.speed > 0.0 { self.route.heading_at(s) } else { self.init_pose.heading };
        Pose::new(p.x, p.y, heading)
    }

    pub fn rect_at(&self, t: f64) -> OrientedRect {
        let p = self.pose_at(t);
        OrientedRect {
            center: p.position(),
            heading: p.heading,
            half_length: self.half_length,
            half_width: self.half_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapData {
    pub centerlines: Vec<Polyline>,
    pub drivable: Polygon,
    pub lane_width: f64,
    pub intersection_zone: Option<Polygon>,
    pub signal: Option<Signal>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioFamily {
    StraightRoad,
    Intersection,
    DenseTraffic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub family: ScenarioFamily,
    pub agent_count: usize,
    /// Planning horizon in steps.
    pub horizon: usize,
    pub dt: f64,
}

impl ScenarioConfig {
    pub fn new(family: ScenarioFamily, agent_count: usize) -> Self {
        ScenarioConfig { family, agent_count, horizon: 8, dt: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRecord {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub map: MapData,
    /// Route the ego is commanded to follow (also one of the centerlines).
    pub route: Polyline,
    pub agents: Vec<Agent>,
    pub ego: EgoStatus,
    pub ego_pose: Pose,
    pub expert: Trajectory,
}

impl ScenarioRecord {
    pub fn ego_rect(pose: &Pose) -> OrientedRect {
        OrientedRect {
            center: pose.position(),
            heading: pose.heading,
            half_length: EGO_HALF_LENGTH,
            half_width: EGO_HALF_WIDTH,
        }
    }

    /// Agent poses at time t (constant-speed route following).
    pub fn step_agents(&self, t: f64) -> Vec<Pose> {
        self.agents.iter().map(|a| a.pose_at(t)).collect()
    }
}

/// Deterministic scenario construction for a (seed, config) pair.
pub fn generate_scenario(seed: u64, config: &ScenarioConfig) -> Result<ScenarioRecord> {
    if config.horizon < 2 {
        return Err(CoreError::Config(format!(
            "horizon must be at least 2, got {}",
            config.horizon
        )));
    }
    const MAX_RETRIES: u64 = 20;
    let mut last_err = None;
    for attempt in 0..MAX_RETRIES {
        match try_generate(seed, config, attempt) {
            Ok(s) => return Ok(s),
            Err(e) => last_err = Some(e),
        }
    }
    Err(CoreError::Generation(format!(
        "no valid scenario for seed {seed} after {MAX_RETRIES} attempts: {}",
        last_err.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn try_generate(seed: u64, config: &ScenarioConfig, attempt: u64) -> Result<ScenarioRecord> {
    let tag = format!("scenario/{seed}/{attempt}");
    let mut rng = keyed_rng(seed, &tag);

    let (map, route, command) = build_map(config.family, &mut rng);
    let ego_pose = Pose::new(0.0, 0.0, route.heading_at(0.0));
    let ego = EgoStatus {
        velocity: rng.random_range(3.0..7.0),
        acceleration: 0.0,
        command,
    };

    let agents = place_agents(config, &map, &ego_pose, &mut rng)?;

    let mut partial = ScenarioRecord {
        seed,
        config: config.clone(),
        map,
        route,
        agents,
        ego,
        ego_pose,
        expert: Trajectory { poses: vec![ego_pose; 2], dt: config.dt }, // replaced below
    };
    partial.expert = expert_policy(&partial)?;
    validate(&partial)?;
    Ok(partial)
}

fn build_map(family: ScenarioFamily, rng: &mut impl Rng) -> (MapData, Polyline, Command) {
    match family {
        ScenarioFamily::StraightRoad | ScenarioFamily::DenseTraffic => {
            let main = Polyline::new(vec![Vec2::new(-8.0, 0.0), Vec2::new(72.0, 0.0)]);
            let adjacent = Polyline::new(vec![Vec2::new(-8.0, LANE_WIDTH), Vec2::new(72.0, LANE_WIDTH)]);
            let drivable = Polygon::rect(-8.0, -LANE_WIDTH / 2.0, 72.0, 1.5 * LANE_WIDTH);
            let map = MapData {
                centerlines: vec![main.clone(), adjacent],
                drivable,
                lane_width: LANE_WIDTH,
                intersection_zone: None,
                signal: None,
            };
            (map, main, Command::Straight)
        }
        ScenarioFamily::Intersection => {
            let cx = 30.0; // crossing center, ahead of the ego
            let half_road = 4.0; // two lanes per road plus shoulder
            let main = Polyline::new(vec![Vec2::new(-8.0, 0.0), Vec2::new(72.0, 0.0)]);
            let cross = Polyline::new(vec![Vec2::new(cx, -40.0), Vec2::new(cx, 40.0)]);
            // cross-shaped drivable area (counterclockwise)
            let drivable = Polygon::new(vec![
                Vec2::new(-8.0, -half_road),
                Vec2::new(cx - half_road, -half_road),
                Vec2::new(cx - half_road, -40.0),
                Vec2::new(cx + half_road, -40.0),
                Vec2::new(cx + half_road, -half_road),
                Vec2::new(72.0, -half_road),
                Vec2::new(72.0, half_road),
                Vec2::new(cx + half_road, half_road),
                Vec2::new(cx + half_road, 40.0),
                Vec2::new(cx - half_road, 40.0),
                Vec2::new(cx - half_road, half_road),
                Vec2::new(-8.0, half_road),
            ]);
            let zone = Polygon::rect(cx - half_road, -half_road, cx + half_road, half_road);

            let command = match rng.random_range(0..3) {
                0 => Command::Left,
                1 => Command::Straight,
                _ => Command::Right,
            };
            let route = match command {
                Command::Straight => main.clone(),
                Command::Left => turn_route(cx, 1.0),
                Command::Right => turn_route(cx, -1.0),
            };

            let entry_s = route.project(Vec2::new(cx - half_road, 0.0)).0;
            let signal = if rng.random_bool(0.5) {
                let red_start: f64 = rng.random_range(0.0..3.0);
                Some(Signal {
                    position: Vec2::new(cx - half_road, -half_road),
                    stop_line_s: entry_s,
                    red_windows: vec![(red_start, red_start + 6.0)],
                })
            } else {
                None
            };

            let map = MapData {
                centerlines: vec![main, cross],
                drivable,
                lane_width: LANE_WIDTH,
                intersection_zone: Some(zone),
                signal,
            };
            (map, route, command)
        }
    }
}

/// Quarter-turn route through the crossing; sign +1 turns left (+y).
fn turn_route(cx: f64, sign: f64) -> Polyline {
    let r = 3.0;
    let entry = Vec2::new(cx - r, 0.0);
    let mut pts = vec![Vec2::new(-8.0, 0.0), entry];
    let center = Vec2::new(cx - r, sign * r);
    let segments = 8;
    for i in 1..=segments {
        let a = -sign * std::f64::consts::FRAC_PI_2 + sign * (i as f64 / segments as f64) * std::f64::consts::FRAC_PI_2;
        pts.push(Vec2::new(center.x + r * a.cos(), center.y + r * a.sin()));
    }
    pts.push(Vec2::new(cx, sign * 40.0));
    Polyline::new(pts)
}

fn place_agents(
    config: &ScenarioConfig,
    map: &MapData,
    ego_pose: &Pose,
    rng: &mut impl Rng,
) -> Result<Vec<Agent>> {
    let ego_rect = ScenarioRecord::ego_rect(ego_pose);
    let mut agents: Vec<Agent> = Vec::new();
    let mut failures = 0;
    while agents.len() < config.agent_count {
        if failures > 60 {
            return Err(CoreError::Generation(format!(
                "could not place {} agents",
                config.agent_count
            )));
        }
        let lane_idx = rng.random_range(0..map.centerlines.len());
        let lane = &map.centerlines[lane_idx];
        let s = rng.random_range(0.25..0.9) * lane.length();
        let pos = lane.point_at(s);
        let heading = lane.heading_at(s);
        // keep a clear launch corridor right in front of the ego
        if pos.x.abs() < 9.0 && pos.y.abs() < 2.0 {
            failures += 1;
            continue;
        }
        let candidate = Agent {
            init_pose: Pose::new(pos.x, pos.y, heading),
            speed: rng.random_range(0.0..5.0),
            route: lane.clone(),
            half_length: EGO_HALF_LENGTH,
            half_width: EGO_HALF_WIDTH,
        };
        let rect = candidate.rect_at(0.0);
        let clear = !rect.intersects(&ego_rect)
            && agents.iter().all(|a| {
                !a.rect_at(0.0).intersects(&rect)
                    && a.init_pose.position().dist(rect.center) > 5.0
            });
        if clear {
            agents.push(candidate);
        } else {
            failures += 1;
        }
    }
    Ok(agents)
}

/// Pure-pursuit centerline following with speed chosen per step to keep
/// time-to-collision above threshold and to stop for red signals.
pub fn expert_policy(scenario: &ScenarioRecord) -> Result<Trajectory> {
    let config = &scenario.config;
    if config.horizon < 2 {
        return Err(CoreError::Config(format!("horizon {} below 2", config.horizon)));
    }
    let dt = config.dt;
    let route = &scenario.route;
    let mut s = route.project(scenario.ego_pose.position()).0;
    let mut v = scenario.ego.velocity.min(CRUISE_SPEED);
    let dv_max = MAX_ACCEL * dt * 0.99; // stay inside the comfort envelope

    let mut poses = Vec::with_capacity(config.horizon);
    let mut degenerate = true;
    for i in 1..=config.horizon {
        let t = i as f64 * dt;
        let v_cap = curvature_speed_cap(route, s, v.max(1.0) * dt + 3.0);
        let mut chosen = 0.0;
        let mut speed = (v + dv_max).min(CRUISE_SPEED).min(v_cap);
        while speed > 0.0 {
            if speed >= v - dv_max - 1e-9 && step_is_safe(scenario, s, speed, t) {
                chosen = speed;
                break;
            }
            speed -= 0.25;
        }
        if chosen == 0.0 && !step_is_safe(scenario, s, 0.0, t) {
            // even holding still collides; give up on this attempt
            return Err(CoreError::Generation("expert cannot avoid collision".into()));
        }
        // come to an actual standstill instead of creeping
        if chosen < 0.5 && step_is_safe(scenario, s, 0.0, t) {
            chosen = 0.0;
        }
        v = chosen;
        s += v * dt;
        if v > 0.0 {
            degenerate = false;
        }
        let p = route.point_at(s);
        poses.push(Pose::new(p.x, p.y, route.heading_at(s)));
    }
    let traj = Trajectory::new(poses, dt)?;
    if degenerate {
        // flagged degenerate stop trajectory: valid but zero progress
        return Ok(traj);
    }
    Ok(traj)
}

/// Largest comfortable speed given local route curvature.
fn curvature_speed_cap(route: &Polyline, s: f64, lookahead: f64) -> f64 {
    let h0 = route.heading_at(s);
    let h1 = route.heading_at(s + lookahead.max(0.5));
    let dh = wrap_angle(h1 - h0).abs();
    if dh < 1e-6 {
        return CRUISE_SPEED;
    }
    let kappa = dh / lookahead.max(0.5);
    // lateral accel margin below the 4 m/s^2 comfort bound
    (3.0 / kappa).sqrt().clamp(1.0, CRUISE_SPEED)
}

fn step_is_safe(scenario: &ScenarioRecord, s: f64, speed: f64, t: f64) -> bool {
    let route = &scenario.route;
    let dt = scenario.config.dt;
    let s_next = s + speed * dt;

    // red-light constraint: do not cross the stop line while red
    if let Some(sig) = &scenario.map.signal {
        if s < sig.stop_line_s && s_next >= sig.stop_line_s - 0.5 && sig.is_red(t) {
            return false;
        }
    }

    let p = route.point_at(s_next);
    let heading = route.heading_at(s_next);
    let ego = OrientedRect {
        center: p,
        heading,
        half_length: EGO_HALF_LENGTH,
        half_width: EGO_HALF_WIDTH,
    };

    // clearance now, with supersampling across the step
    for k in 0..=4 {
        let tk = t - dt + dt * k as f64 / 4.0;
        let sk = s + speed * dt * k as f64 / 4.0;
        let pk = route.point_at(sk);
        let rk = OrientedRect {
            center: pk,
            heading: route.heading_at(sk),
            half_length: EGO_HALF_LENGTH + 0.3,
            half_width: EGO_HALF_WIDTH + 0.2,
        };
        for a in &scenario.agents {
            if a.rect_at(tk).intersects(&rk) {
                return false;
            }
        }
    }

    // constant-velocity propagation for the TTC horizon
    let steps = 10;
    for k in 0..=steps {
        let tau = TTC_THRESHOLD * k as f64 / steps as f64;
        let prop = OrientedRect {
            center: Vec2::new(
                ego.center.x + speed * heading.cos() * tau,
                ego.center.y + speed * heading.sin() * tau,
            ),
            heading,
            half_length: EGO_HALF_LENGTH + 0.2,
            half_width: EGO_HALF_WIDTH + 0.1,
        };
        for a in &scenario.agents {
            let ap = a.pose_at(t);
            let moved = OrientedRect {
                center: Vec2::new(
                    ap.x + a.speed * ap.heading.cos() * tau,
                    ap.y + a.speed * ap.heading.sin() * tau,
                ),
                heading: ap.heading,
                half_length: a.half_length,
                half_width: a.half_width,
            };
            if moved.intersects(&prop) {
                return false;
            }
        }
    }
    true
}

/// Generation-time contract: the expert must hold no-collision and stay in
/// the drivable area at 10x supersampling.
fn validate(scenario: &ScenarioRecord) -> Result<()> {
    let dt = scenario.config.dt;
    let mut prev = scenario.ego_pose;
    for (i, pose) in scenario.expert.poses.iter().enumerate() {
        let t1 = (i + 1) as f64 * dt;
        for k in 0..=10 {
            let f = k as f64 / 10.0;
            let t = t1 - dt + dt * f;
            let interp = Pose::new(
                prev.x + (pose.x - prev.x) * f,
                prev.y + (pose.y - prev.y) * f,
                prev.heading + wrap_angle(pose.heading - prev.heading) * f,
            );
            let rect = ScenarioRecord::ego_rect(&interp);
            for a in &scenario.agents {
                if a.rect_at(t).intersects(&rect) {
                    return Err(CoreError::Generation("expert collides with agent".into()));
                }
            }
            for c in rect.corners() {
                if !scenario.map.drivable.contains(c) {
                    return Err(CoreError::Generation("expert leaves drivable area".into()));
                }
            }
        }
        prev = *pose;
    }
    Ok(())
}
