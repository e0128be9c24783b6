//! Synthetic 2-D driving micro-world: seeded scenario generation, kinematic
//! agent stepping, BEV semantic rendering, and a deterministic featurizer
//! standing in for a perception stack.

pub mod geometry;
mod io;
mod render;
mod scenario;

pub use geometry::{wrap_angle, OrientedRect, Polygon, Polyline, Vec2};
pub use io::{load_scenarios, save_scenarios, SCENARIO_SCHEMA_VERSION};
pub use render::{
    decode_bev_layers, encode_bev_features, render_semantic_bev, BevGrid, GridConfig,
    SemanticBevMap, LAYER_DRIVABLE, LAYER_LANE, LAYER_OCCUPANCY, NUM_LAYERS,
};
pub use scenario::{
    expert_policy, generate_scenario, Agent, Command, EgoStatus, MapData, Pose, ScenarioConfig,
    ScenarioFamily, ScenarioRecord, Signal, Trajectory, EGO_HALF_LENGTH, EGO_HALF_WIDTH,
    LANE_WIDTH, V_MAX,
};
