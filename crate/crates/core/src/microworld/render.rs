use super::scenario::ScenarioRecord;
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// BEV grid geometry and channel width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub h: usize,
    pub w: usize,
    /// Longitudinal coverage in meters (x, forward).
    pub lx: f64,
    /// Lateral coverage in meters (y).
    pub ly: f64,
    /// Feature channels after encoding.
    pub c: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { h: 64, w: 64, lx: 64.0, ly: 64.0, c: 16 }
    }
}

impl GridConfig {
    /// Continuous BEV pixel indices for ego-frame meters:
    /// h = x·H/L_x, w = y·W/L_y + W/2.
    pub fn project_to_bev(&self, x: f64, y: f64) -> (f64, f64) {
        (x * self.h as f64 / self.lx, y * self.w as f64 / self.ly + self.w as f64 / 2.0)
    }

    /// Inverse of [`Self::project_to_bev`].
    pub fn bev_to_meters(&self, h: f64, w: f64) -> (f64, f64) {
        (h * self.lx / self.h as f64, (w - self.w as f64 / 2.0) * self.ly / self.w as f64)
    }

    /// Ego-frame meters at the center of cell (i, j).
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        self.bev_to_meters(i as f64 + 0.5, j as f64 + 0.5)
    }
}

pub const LAYER_DRIVABLE: usize = 0;
pub const LAYER_LANE: usize = 1;
pub const LAYER_OCCUPANCY: usize = 2;
pub const NUM_LAYERS: usize = 3;

/// Categorical BEV planes rendered from a scenario at a fixed time.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticBevMap {
    /// [NUM_LAYERS, H, W], row-major; binary planes.
    pub layers: Tensor,
    pub grid: GridConfig,
    pub t: f64,
}

/// Encoded feature grid: the substrate for action injection and rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct BevGrid {
    /// [H, W, C]
    pub features: Tensor,
    pub grid: GridConfig,
}

/// Rasterize drivable, lane-proximity, and agent-occupancy planes at time t.
pub fn render_semantic_bev(scenario: &ScenarioRecord, t: f64, grid: &GridConfig) -> SemanticBevMap {
    let (h, w) = (grid.h, grid.w);
    let mut layers = Tensor::zeros(&[NUM_LAYERS, h, w]);
    let agent_rects: Vec<_> = scenario.agents.iter().map(|a| a.rect_at(t)).collect();
    for i in 0..h {
        for j in 0..w {
            let (x, y) = grid.cell_center(i, j);
            let p = super::geometry::Vec2::new(x, y);
            if scenario.map.drivable.contains(p) {
                layers.data[LAYER_DRIVABLE * h * w + i * w + j] = 1.0;
            }
            let near_lane = scenario
                .map
                .centerlines
                .iter()
                .any(|c| c.project(p).1 <= 0.5);
            if near_lane {
                layers.data[LAYER_LANE * h * w + i * w + j] = 1.0;
            }
            if agent_rects.iter().any(|r| rect_contains(r, p)) {
                layers.data[LAYER_OCCUPANCY * h * w + i * w + j] = 1.0;
            }
        }
    }
    SemanticBevMap { layers, grid: *grid, t }
}

fn rect_contains(r: &super::geometry::OrientedRect, p: super::geometry::Vec2) -> bool {
    let d = p.sub(r.center);
    let (s, c) = r.heading.sin_cos();
    let lon = d.x * c + d.y * s;
    let lat = -d.x * s + d.y * c;
    lon.abs() <= r.half_length && lat.abs() <= r.half_width
}

/// Fixed mixing coefficients lifting the semantic layers into the derived
/// feature channels. Small integers keep the lift exactly recoverable.
fn lift_coefficient(channel: usize, layer: usize) -> f64 {
    // deterministic, non-degenerate pattern over (channel, layer)
    (((channel * 7 + layer * 3 + 1) % 5) as f64) - 2.0
}

/// Deterministic linear lift of the semantic planes to C channels.
///
/// Channels 0..NUM_LAYERS carry the layers verbatim (so recovery is exact),
/// channels NUM_LAYERS..C-2 carry fixed linear mixes, and the last two
/// channels hold normalized cell-center coordinates.
pub fn encode_bev_features(map: &SemanticBevMap) -> Result<BevGrid> {
    let grid = map.grid;
    let (h, w, c) = (grid.h, grid.w, grid.c);
    if c < NUM_LAYERS + 2 {
        return Err(CoreError::Config(format!(
            "channel count {c} below minimum {}",
            NUM_LAYERS + 2
        )));
    }
    let mut features = Tensor::zeros(&[h, w, c]);
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * c;
            for l in 0..NUM_LAYERS {
                let v = map.layers.data[l * h * w + i * w + j];
                features.data[base + l] = v;
                for ch in NUM_LAYERS..c - 2 {
                    features.data[base + ch] += lift_coefficient(ch, l) * v;
                }
            }
            features.data[base + c - 2] = (i as f64 + 0.5) / h as f64;
            features.data[base + c - 1] = (j as f64 + 0.5) / w as f64;
        }
    }
    Ok(BevGrid { features, grid })
}

/// Exact inverse of [`encode_bev_features`] on the layer subspace.
pub fn decode_bev_layers(grid: &BevGrid) -> Tensor {
    let (h, w, c) = (grid.grid.h, grid.grid.w, grid.grid.c);
    let mut layers = Tensor::zeros(&[NUM_LAYERS, h, w]);
    for i in 0..h {
        for j in 0..w {
            for l in 0..NUM_LAYERS {
                layers.data[l * h * w + i * w + j] = grid.features.data[(i * w + j) * c + l];
            }
        }
    }
    layers
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microworld::scenario::{generate_scenario, ScenarioConfig, ScenarioFamily};

    fn small_grid() -> GridConfig {
        GridConfig { h: 64, w: 64, lx: 64.0, ly: 64.0, c: 8 }
    }

    #[test]
    fn empty_scene_has_zero_occupancy() {
        let s = generate_scenario(7, &ScenarioConfig::new(ScenarioFamily::StraightRoad, 0)).unwrap();
        let map = render_semantic_bev(&s, 0.0, &small_grid());
        let hw = 64 * 64;
        assert!(map.layers.data[LAYER_OCCUPANCY * hw..(LAYER_OCCUPANCY + 1) * hw]
            .iter()
            .all(|v| *v == 0.0));
    }

    #[test]
    fn axis_aligned_agent_occupies_exact_cells() {
        // 2x2 m agent centered on a cell-corner lattice point of a 1 m grid
        let mut s = generate_scenario(7, &ScenarioConfig::new(ScenarioFamily::StraightRoad, 0)).unwrap();
        s.agents.push(crate::microworld::scenario::Agent {
            init_pose: crate::microworld::scenario::Pose::new(20.0, 0.0, 0.0),
            speed: 0.0,
            route: s.map.centerlines[0].clone(),
            half_length: 1.0,
            half_width: 1.0,
        });
        let grid = small_grid();
        let map = render_semantic_bev(&s, 0.0, &grid);
        let hw = 64 * 64;
        let occ = &map.layers.data[LAYER_OCCUPANCY * hw..(LAYER_OCCUPANCY + 1) * hw];
        let count: f64 = occ.iter().sum();
        assert_eq!(count, 4.0);
        // (20, 0) maps to pixel (20, 32): the 2x2 block of cells whose centers
        // fall inside is rows 19..=20, cols 31..=32
        for (i, j) in [(19, 31), (19, 32), (20, 31), (20, 32)] {
            assert_eq!(occ[i * 64 + j], 1.0, "cell ({i},{j})");
        }
    }

    #[test]
    fn drivable_layer_area_matches_polygon() {
        for seed in [1u64, 2, 3] {
            let s =
                generate_scenario(seed, &ScenarioConfig::new(ScenarioFamily::Intersection, 0)).unwrap();
            let grid = small_grid();
            let map = render_semantic_bev(&s, 0.0, &grid);
            let hw = 64 * 64;
            let cell_area = (grid.lx / grid.h as f64) * (grid.ly / grid.w as f64);
            let raster: f64 =
                map.layers.data[LAYER_DRIVABLE * hw..(LAYER_DRIVABLE + 1) * hw].iter().sum::<f64>()
                    * cell_area;
            // clip the polygon's area to the rendered extents analytically:
            // the drivable shapes here are axis-aligned unions, so count via
            // fine sampling as the oracle
            let mut oracle = 0.0;
            let fine = 4;
            for i in 0..grid.h * fine {
                for j in 0..grid.w * fine {
                    let x = (i as f64 + 0.5) * grid.lx / (grid.h * fine) as f64;
                    let y = ((j as f64 + 0.5) / fine as f64 - grid.w as f64 / 2.0) * grid.ly
                        / grid.w as f64;
                    if s.map.drivable.contains(super::super::geometry::Vec2::new(x, y)) {
                        oracle += cell_area / (fine * fine) as f64;
                    }
                }
            }
            let rel = (raster - oracle).abs() / oracle;
            assert!(rel < 0.05, "seed {seed}: raster {raster}, oracle {oracle}");
        }
    }

    #[test]
    fn encode_is_local_and_exactly_invertible() {
        let s = generate_scenario(9, &ScenarioConfig::new(ScenarioFamily::DenseTraffic, 3)).unwrap();
        let grid = small_grid();
        let map = render_semantic_bev(&s, 0.0, &grid);
        let enc = encode_bev_features(&map).unwrap();
        assert_eq!(decode_bev_layers(&enc), map.layers);

        // locality: flip one cell, only that cell's features change
        let mut map2 = map.clone();
        let hw = 64 * 64;
        let cell = 17 * 64 + 40;
        map2.layers.data[LAYER_LANE * hw + cell] = 1.0 - map2.layers.data[LAYER_LANE * hw + cell];
        let enc2 = encode_bev_features(&map2).unwrap();
        for idx in 0..enc.features.data.len() {
            let same = enc.features.data[idx] == enc2.features.data[idx];
            if idx / grid.c == cell {
                continue;
            }
            assert!(same, "feature {idx} changed outside the flipped cell");
        }
    }

    #[test]
    fn all_zero_map_keeps_only_coordinate_channels() {
        let grid = small_grid();
        let map = SemanticBevMap { layers: Tensor::zeros(&[NUM_LAYERS, 64, 64]), grid, t: 0.0 };
        let enc = encode_bev_features(&map).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let base = (i * 64 + j) * grid.c;
                for ch in 0..grid.c - 2 {
                    assert_eq!(enc.features.data[base + ch], 0.0);
                }
                assert!(enc.features.data[base + grid.c - 2] > 0.0);
            }
        }
    }

    #[test]
    fn render_at_zero_matches_unstepped() {
        let s = generate_scenario(4, &ScenarioConfig::new(ScenarioFamily::DenseTraffic, 4)).unwrap();
        let grid = small_grid();
        let a = render_semantic_bev(&s, 0.0, &grid);
        let b = render_semantic_bev(&s, 0.0, &grid);
        assert_eq!(a.layers, b.layers);
    }
}
