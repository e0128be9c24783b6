//! Rule-based metric oracle: collision, drivable-area, time-to-collision,
//! progress, comfort, direction, lane-keeping, and traffic-light checks,
//! aggregated into a PDMS-style composite.

use crate::error::{CoreError, Result};
use crate::microworld::{
    expert_policy, wrap_angle, Pose, ScenarioRecord, Trajectory, Vec2,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricThresholds {
    /// Constant-velocity propagation horizon for TTC, seconds.
    pub ttc_horizon: f64,
    pub max_long_accel: f64,
    pub max_lat_accel: f64,
    pub max_jerk: f64,
    pub max_yaw_rate: f64,
    /// Temporal supersampling factor between waypoints.
    pub supersample: usize,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        MetricThresholds {
            ttc_horizon: 1.0,
            max_long_accel: 4.0,
            max_lat_accel: 4.0,
            max_jerk: 8.0,
            max_yaw_rate: 1.0,
            supersample: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdmsWeights {
    pub ep: f64,
    pub ttc: f64,
    pub comf: f64,
    /// Multiply DDC, LK and TLC into the hard-penalty prefix.
    pub extended: bool,
}

impl Default for PdmsWeights {
    fn default() -> Self {
        PdmsWeights { ep: 5.0, ttc: 5.0, comf: 2.0, extended: false }
    }
}

/// Binary sub-metrics are 0.0 or 1.0; ep and pdms live in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nc: f64,
    pub dac: f64,
    pub ttc: f64,
    pub ep: f64,
    pub comf: f64,
    pub ddc: f64,
    pub lk: f64,
    pub tlc: f64,
    pub pdms: f64,
}

impl MetricReport {
    pub fn all_ones() -> Self {
        MetricReport {
            nc: 1.0,
            dac: 1.0,
            ttc: 1.0,
            ep: 1.0,
            comf: 1.0,
            ddc: 1.0,
            lk: 1.0,
            tlc: 1.0,
            pdms: 1.0,
        }
    }
}

/// Interpolated ego states at `samples` points per waypoint interval,
/// starting from the scenario's initial pose at t = 0.
pub fn sample_states(
    traj: &Trajectory,
    start: &Pose,
    samples: usize,
) -> Vec<(f64, Pose)> {
    let dt = traj.dt;
    let mut prev = *start;
    let mut out = vec![(0.0, prev)];
    for (i, p) in traj.poses.iter().enumerate() {
        let t0 = i as f64 * dt;
        for k in 1..=samples {
            let f = k as f64 / samples as f64;
            let x = prev.x + (p.x - prev.x) * f;
            let y = prev.y + (p.y - prev.y) * f;
            let h = prev.heading + wrap_angle(p.heading - prev.heading) * f;
            out.push((t0 + f * dt, Pose::new(x, y, h)));
        }
        prev = *p;
    }
    out
}

/// No collision: 1 iff the ego rectangle never meets an agent rectangle.
pub fn no_at_fault_collision(
    traj: &Trajectory,
    scenario: &ScenarioRecord,
    th: &MetricThresholds,
) -> f64 {
    for (t, pose) in sample_states(traj, &scenario.ego_pose, th.supersample) {
        let ego = ScenarioRecord::ego_rect(&pose);
        for agent in &scenario.agents {
            if ego.intersects(&agent.rect_at(t)) {
                return 0.0;
            }
        }
    }
    1.0
}

/// Drivable-area compliance: all four footprint corners inside the polygon
/// (boundary inclusive) at every sample.
pub fn drivable_area_compliance(
    traj: &Trajectory,
    scenario: &ScenarioRecord,
    th: &MetricThresholds,
) -> f64 {
    for (_, pose) in sample_states(traj, &scenario.ego_pose, th.supersample) {
        let ego = ScenarioRecord::ego_rect(&pose);
        for corner in ego.corners() {
            if !scenario.map.drivable.contains(corner) {
                return 0.0;
            }
        }
    }
    1.0
}

/// Time to collision: propagate ego and agents at instantaneous velocities
/// for the threshold horizon; 1 iff no propagated overlap at any sample.
pub fn time_to_collision(
    traj: &Trajectory,
    scenario: &ScenarioRecord,
    th: &MetricThresholds,
) -> f64 {
    let states = sample_states(traj, &scenario.ego_pose, th.supersample);
    for w in states.windows(2) {
        let (t0, p0) = w[0];
        let (t1, p1) = w[1];
        let step = t1 - t0;
        let ego_v = Vec2::new((p1.x - p0.x) / step, (p1.y - p0.y) / step);
        for k in 1..=10 {
            let tau = th.ttc_horizon * k as f64 / 10.0;
            let mut ego = ScenarioRecord::ego_rect(&p0);
            ego.center = ego.center.add(ego_v.scale(tau));
            for agent in &scenario.agents {
                let ap = agent.pose_at(t0);
                let av = Vec2::new(
                    agent.speed * ap.heading.cos(),
                    agent.speed * ap.heading.sin(),
                );
                let mut rect = agent.rect_at(t0);
                rect.center = rect.center.add(av.scale(tau));
                if ego.intersects(&rect) {
                    return 0.0;
                }
            }
        }
    }
    1.0
}

fn route_progress(traj: &Trajectory, scenario: &ScenarioRecord) -> f64 {
    let route = &scenario.route;
    let s0 = route.project(scenario.ego_pose.position()).0;
    let s1 = route.project(traj.poses.last().unwrap().position()).0;
    (s1 - s0).max(0.0)
}

/// Ego progress: projected route arc-length relative to the expert's, clipped
/// to [0, 1]. A (near-)stationary expert scores any trajectory 1.
pub fn ego_progress(traj: &Trajectory, scenario: &ScenarioRecord) -> f64 {
    let expert = route_progress(&scenario.expert, scenario);
    if expert < 0.1 {
        return 1.0;
    }
    (route_progress(traj, scenario) / expert).clamp(0.0, 1.0)
}

/// Comfort: finite-difference longitudinal/lateral acceleration, jerk, and
/// yaw-rate bounds, all closed inequalities.
pub fn comfort(traj: &Trajectory, start: &Pose, th: &MetricThresholds) -> f64 {
    let dt = traj.dt;
    let mut positions = vec![start.position()];
    let mut headings = vec![start.heading];
    for p in &traj.poses {
        positions.push(p.position());
        headings.push(p.heading);
    }
    let vels: Vec<Vec2> =
        positions.windows(2).map(|w| w[1].sub(w[0]).scale(1.0 / dt)).collect();
    let accs: Vec<Vec2> = vels.windows(2).map(|w| w[1].sub(w[0]).scale(1.0 / dt)).collect();
    for (i, a) in accs.iter().enumerate() {
        // decompose along the heading at the acceleration sample
        let h = traj.poses[i].heading;
        let dir = Vec2::new(h.cos(), h.sin());
        let normal = Vec2::new(-h.sin(), h.cos());
        if a.dot(dir).abs() > th.max_long_accel || a.dot(normal).abs() > th.max_lat_accel {
            return 0.0;
        }
    }
    for w in accs.windows(2) {
        if w[1].sub(w[0]).scale(1.0 / dt).norm() > th.max_jerk {
            return 0.0;
        }
    }
    for w in headings.windows(2) {
        if (wrap_angle(w[1] - w[0]) / dt).abs() > th.max_yaw_rate {
            return 0.0;
        }
    }
    1.0
}

fn nearest_centerline(scenario: &ScenarioRecord, p: Vec2) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0);
    for line in &scenario.map.centerlines {
        let (s, d) = line.project(p);
        if d < best.0 {
            best = (d, line.heading_at(s));
        }
    }
    best
}

/// Driving direction: heading within 90° of the lane tangent at every
/// on-lane sample.
pub fn driving_direction_compliance(
    traj: &Trajectory,
    scenario: &ScenarioRecord,
    th: &MetricThresholds,
) -> f64 {
    let half = scenario.map.lane_width / 2.0;
    for (_, pose) in sample_states(traj, &scenario.ego_pose, th.supersample) {
        let (d, tangent) = nearest_centerline(scenario, pose.position());
        if d <= half && wrap_angle(pose.heading - tangent).abs() > std::f64::consts::FRAC_PI_2 {
            return 0.0;
        }
    }
    1.0
}

/// Lane keeping: lateral deviation within half a lane width at all samples
/// outside intersection zones.
pub fn lane_keeping(
    traj: &Trajectory,
    scenario: &ScenarioRecord,
    th: &MetricThresholds,
) -> f64 {
    let half = scenario.map.lane_width / 2.0;
    for (_, pose) in sample_states(traj, &scenario.ego_pose, th.supersample) {
        if let Some(zone) = &scenario.map.intersection_zone {
            if zone.contains(pose.position()) {
                continue;
            }
        }
        let (d, _) = nearest_centerline(scenario, pose.position());
        if d > half {
            return 0.0;
        }
    }
    1.0
}

/// Traffic-light compliance: never cross the stop line while red.
pub fn traffic_light_compliance(
    traj: &Trajectory,
    scenario: &ScenarioRecord,
    th: &MetricThresholds,
) -> f64 {
    let Some(signal) = &scenario.map.signal else { return 1.0 };
    let route = &scenario.route;
    let states = sample_states(traj, &scenario.ego_pose, th.supersample);
    for w in states.windows(2) {
        let s0 = route.project(w[0].1.position()).0;
        let s1 = route.project(w[1].1.position()).0;
        if s0 < signal.stop_line_s && s1 >= signal.stop_line_s && signal.is_red(w[1].0) {
            return 0.0;
        }
    }
    1.0
}

/// PDMS = hard penalties × weighted soft average; the extended variant also
/// gates on DDC, LK and TLC.
pub fn pdms_aggregate(report: &MetricReport, weights: &PdmsWeights) -> f64 {
    let mut hard = report.nc * report.dac;
    if weights.extended {
        hard *= report.ddc * report.lk * report.tlc;
    }
    let total = weights.ep + weights.ttc + weights.comf;
    hard * (weights.ep * report.ep + weights.ttc * report.ttc + weights.comf * report.comf)
        / total
}

/// Full oracle evaluation of one trajectory against its scenario.
pub fn evaluate(
    traj: &Trajectory,
    scenario: &ScenarioRecord,
    th: &MetricThresholds,
    weights: &PdmsWeights,
) -> Result<MetricReport> {
    if traj.poses.len() != scenario.config.horizon || (traj.dt - scenario.config.dt).abs() > 1e-12 {
        return Err(CoreError::Contract(format!(
            "evaluate: trajectory {}@{} vs scenario {}@{}",
            traj.poses.len(),
            traj.dt,
            scenario.config.horizon,
            scenario.config.dt
        )));
    }
    let mut report = MetricReport {
        nc: no_at_fault_collision(traj, scenario, th),
        dac: drivable_area_compliance(traj, scenario, th),
        ttc: time_to_collision(traj, scenario, th),
        ep: ego_progress(traj, scenario),
        comf: comfort(traj, &scenario.ego_pose, th),
        ddc: driving_direction_compliance(traj, scenario, th),
        lk: lane_keeping(traj, scenario, th),
        tlc: traffic_light_compliance(traj, scenario, th),
        pdms: 0.0,
    };
    report.pdms = pdms_aggregate(&report, weights);
    Ok(report)
}

/// Oracle supervision tuple for the score head, in (safety, comfort,
/// efficiency, compliance) order.
pub fn objective_tuple(report: &MetricReport) -> [f64; 4] {
    [
        report.nc.min(report.ttc),
        report.comf,
        report.ep,
        report.dac * report.ddc * report.lk * report.tlc,
    ]
}

/// Re-derive the scenario's expert trajectory (used by oracle selectors).
pub fn expert_reference(scenario: &ScenarioRecord) -> Result<Trajectory> {
    expert_policy(scenario)
}
