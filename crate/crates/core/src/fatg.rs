//! Future-aware trajectory generation: anchor action tokens, bilinear
//! intent injection into the BEV grid, the Transformer–2×Mamba–Transformer
//! world action model, and anchor-offset trajectory decoding.

use crate::error::{CoreError, Result};
use crate::microworld::{Command, EgoStatus, GridConfig, Pose, Trajectory};
use crate::nn::{attention_sublayer, mean_rows, transformer_layer};
use crate::tensor::{Init, ParamStore, Tape, Tensor, Var};

pub const D_POSE: usize = 3;

/// Per-waypoint bound on decoded offsets, meters for (x, y) and radians for
/// heading. Keeps refined trajectories inside the kinematic envelope.
pub const MAX_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct FatgConfig {
    pub heads: usize,
    pub mamba_state: usize,
}

impl Default for FatgConfig {
    fn default() -> Self {
        FatgConfig { heads: 4, mamba_state: 8 }
    }
}

/// In-grid cells of a bilinear 2×2 neighborhood with weights renormalized to
/// sum 1. Empty when the whole neighborhood falls outside the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFootprint {
    pub cells: Vec<(usize, usize)>,
    pub weights: Vec<f64>,
}

pub fn bilinear_footprint(h: f64, w: f64, h_max: usize, w_max: usize) -> GridFootprint {
    let h0 = h.floor();
    let w0 = w.floor();
    let fh = h - h0;
    let fw = w - w0;
    let raw = [
        (h0, w0, (1.0 - fh) * (1.0 - fw)),
        (h0, w0 + 1.0, (1.0 - fh) * fw),
        (h0 + 1.0, w0, fh * (1.0 - fw)),
        (h0 + 1.0, w0 + 1.0, fh * fw),
    ];
    let mut cells = Vec::with_capacity(4);
    let mut weights = Vec::with_capacity(4);
    for (ch, cw, wt) in raw {
        if ch >= 0.0 && cw >= 0.0 && (ch as usize) < h_max && (cw as usize) < w_max {
            cells.push((ch as usize, cw as usize));
            weights.push(wt);
        }
    }
    let total: f64 = weights.iter().sum();
    if total > 0.0 {
        for w in &mut weights {
            *w /= total;
        }
    } else {
        cells.clear();
        weights.clear();
    }
    GridFootprint { cells, weights }
}

/// Eq.2–3: add w_ij · token at the four neighbors of every anchor waypoint.
/// The input grid is untouched; the returned variant is a fresh node.
pub fn inject_action(
    tape: &mut Tape,
    grid: Var,
    token: Var,
    anchor: &Trajectory,
    grid_cfg: &GridConfig,
) -> Result<Var> {
    let shape = tape.shape(grid).to_vec();
    if shape.len() != 3 || shape[0] != grid_cfg.h || shape[1] != grid_cfg.w {
        return Err(CoreError::Dimension(format!(
            "inject_action: grid {shape:?} vs config {}x{}",
            grid_cfg.h, grid_cfg.w
        )));
    }
    let mut points = Vec::with_capacity(anchor.poses.len() * 4);
    for p in &anchor.poses {
        let (h, w) = grid_cfg.project_to_bev(p.x, p.y);
        let fp = bilinear_footprint(h, w, grid_cfg.h, grid_cfg.w);
        for ((i, j), wt) in fp.cells.iter().zip(&fp.weights) {
            points.push((i * grid_cfg.w + j, *wt));
        }
    }
    tape.scatter_points(grid, token, &points)
}

/// Self-attention over waypoint embeddings, pooled and fused with ego status
/// through an MLP (§3.2.1 action-token encoder).
pub fn encode_action_token(
    tape: &mut Tape,
    store: &mut ParamStore,
    anchor: &Trajectory,
    ego: &EgoStatus,
    c: usize,
    cfg: &FatgConfig,
) -> Result<Var> {
    let t = anchor.poses.len();
    let wp = Tensor::new(
        vec![t, D_POSE],
        anchor.poses.iter().flat_map(|p| [p.x, p.y, p.heading]).collect(),
    )?;
    let wp = tape.input(wp);
    let ew = tape.param(store, "fatg.act.embed_w", &[D_POSE, c], Init::Uniform);
    let eb = tape.param(store, "fatg.act.embed_b", &[c], Init::Uniform);
    let x = tape.linear(wp, ew, eb)?;
    let x = attention_sublayer(tape, store, "fatg.act", x, cfg.heads, None)?;

    // mean-pool the T tokens, then append ego features
    let pooled = mean_rows(tape, x)?;
    let cmd = match ego.command {
        Command::Left => -1.0,
        Command::Straight => 0.0,
        Command::Right => 1.0,
    };
    let ego_feat =
        tape.input(Tensor::new(vec![1, 3], vec![ego.velocity, ego.acceleration, cmd])?);
    let fused = tape.concat(pooled, ego_feat, 1)?;
    let w1 = tape.param(store, "fatg.act.mlp1_w", &[c + 3, c], Init::Uniform);
    let b1 = tape.param(store, "fatg.act.mlp1_b", &[c], Init::Uniform);
    let h = tape.linear(fused, w1, b1)?;
    let h = tape.relu(h);
    let w2 = tape.param(store, "fatg.act.mlp2_w", &[c, c], Init::Uniform);
    let b2 = tape.param(store, "fatg.act.mlp2_b", &[c], Init::Uniform);
    let out = tape.linear(h, w2, b2)?;
    tape.reshape(out, &[c])
}

/// One anchor-conditioned grid copy per vocabulary entry (Eq.4).
pub fn build_scene_variants(
    tape: &mut Tape,
    store: &mut ParamStore,
    grid: Var,
    anchors: &[Trajectory],
    ego: &EgoStatus,
    grid_cfg: &GridConfig,
    cfg: &FatgConfig,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut tokens = Vec::with_capacity(anchors.len());
    let mut variants = Vec::with_capacity(anchors.len());
    for anchor in anchors {
        let token = encode_action_token(tape, store, anchor, ego, grid_cfg.c, cfg)?;
        variants.push(inject_action(tape, grid, token, anchor, grid_cfg)?);
        tokens.push(token);
    }
    Ok((variants, tokens))
}


/// Raw selective scan: per channel d, h_l = exp(Δ_{l,d}·A_d)·h_{l−1} +
/// Δ_{l,d}·B_l·x_{l,d}, y_{l,d} = C_l·h_{l,d} + D_d·x_{l,d}.
pub fn selective_scan(
    tape: &mut Tape,
    u: Var,
    delta: Var,
    b_seq: Var,
    c_seq: Var,
    a: Var,
    d_skip: Var,
) -> Result<Var> {
    let su = tape.shape(u).to_vec();
    let sa = tape.shape(a).to_vec();
    if su.len() != 2 || sa.len() != 2 || sa[0] != su[1] {
        return Err(CoreError::Dimension(format!("selective_scan: u {su:?}, A {sa:?}")));
    }
    let (l_len, d) = (su[0], su[1]);
    let n = sa[1];
    let sb = tape.shape(b_seq).to_vec();
    let sc = tape.shape(c_seq).to_vec();
    if sb != [l_len, n] || sc != [l_len, n] {
        return Err(CoreError::Dimension(format!(
            "selective_scan: B {sb:?}, C {sc:?}, want [{l_len}, {n}]"
        )));
    }
    let d_row = tape.reshape(d_skip, &[1, d])?;
    let mut h = tape.constant(Tensor::zeros(&[d, n]));
    let mut rows = Vec::with_capacity(l_len);
    for l in 0..l_len {
        let delta_l = tape.slice_rows(delta, l, 1)?;
        let u_l = tape.slice_rows(u, l, 1)?;
        let b_l = tape.slice_rows(b_seq, l, 1)?;
        let c_l = tape.slice_rows(c_seq, l, 1)?;
        let delta_vec = tape.reshape(delta_l, &[d])?;
        let da = tape.row_scale(a, delta_vec)?;
        let abar = tape.exp(da);
        h = tape.mul(abar, h)?;
        let du = tape.mul(delta_l, u_l)?;
        let du_col = tape.reshape(du, &[d, 1])?;
        let inject = tape.matmul(du_col, b_l)?;
        h = tape.add(h, inject)?;
        let hc = tape.matmul_nt(h, c_l)?;
        let hc = tape.reshape(hc, &[1, d])?;
        let skip = tape.mul(u_l, d_row)?;
        rows.push(tape.add(hc, skip)?);
    }
    tape.concat_rows(&rows)
}

/// Selective-SSM block with input/output projections and SiLU gating.
/// Zeroing `{prefix}.out_w` and `{prefix}.out_b` makes the block output zero.
pub fn mamba_scan(
    tape: &mut Tape,
    store: &mut ParamStore,
    prefix: &str,
    x: Var,
    cfg: &FatgConfig,
) -> Result<Var> {
    let d = *tape.shape(x).last().unwrap();
    let n = cfg.mamba_state;
    let lin = |tape: &mut Tape,
                   store: &mut ParamStore,
                   name: &str,
                   d_out: usize|
     -> Result<Var> {
        let w = tape.param(store, &format!("{prefix}.{name}_w"), &[d, d_out], Init::Uniform);
        let b = tape.param(store, &format!("{prefix}.{name}_b"), &[d_out], Init::Uniform);
        tape.linear(x, w, b)
    };
    let u = lin(tape, store, "in", d)?;
    let gate_pre = lin(tape, store, "gate", d)?;
    let delta_pre = lin(tape, store, "delta", d)?;
    let b_seq = lin(tape, store, "bproj", n)?;
    let c_seq = lin(tape, store, "cproj", n)?;
    let delta = tape.softplus(delta_pre);
    let a_log = tape.param(store, &format!("{prefix}.a_log"), &[d, n], Init::Uniform);
    let a_pos = tape.exp(a_log);
    let a = tape.scale(a_pos, -1.0);
    let d_skip = tape.param(store, &format!("{prefix}.d_skip"), &[d], Init::Uniform);
    let y = selective_scan(tape, u, delta, b_seq, c_seq, a, d_skip)?;
    let gate = tape.silu(gate_pre);
    let gated = tape.mul(y, gate)?;
    let ow = tape.param(store, &format!("{prefix}.out_w"), &[d, d], Init::Uniform);
    let ob = tape.param(store, &format!("{prefix}.out_b"), &[d], Init::Zeros);
    tape.linear(gated, ow, ob)
}

/// Temporal stage of the sandwich (Eq.6): two pre-normalized Mamba residual
/// blocks. With both output projections zeroed this is the exact identity.
pub fn wam_temporal(tape: &mut Tape, store: &mut ParamStore, z: Var, cfg: &FatgConfig) -> Result<Var> {
    let d = *tape.shape(z).last().unwrap();
    let mut z = z;
    for i in 0..2 {
        let g = tape.param(store, &format!("wam.pre{i}_g"), &[d], Init::Uniform);
        let b = tape.param(store, &format!("wam.pre{i}_b"), &[d], Init::Zeros);
        let zn = tape.layer_norm(z, g, b, 1e-5)?;
        let m = mamba_scan(tape, store, &format!("wam.mamba{i}"), zn, cfg)?;
        z = tape.add(z, m)?;
    }
    Ok(z)
}

/// One world-model step over a single variant: spatial transformer encoder,
/// temporal Mamba stack, spatial transformer decoder (Eqs.5–7).
pub fn wam_step(
    tape: &mut Tape,
    store: &mut ParamStore,
    variant: Var,
    grid_cfg: &GridConfig,
    cfg: &FatgConfig,
) -> Result<Var> {
    let (h, w, c) = (grid_cfg.h, grid_cfg.w, grid_cfg.c);
    let tokens = tape.reshape(variant, &[h * w, c])?;
    let z_t = transformer_layer(tape, store, "wam.enc", tokens, cfg.heads, None)?;
    let z_tk = wam_temporal(tape, store, z_t, cfg)?;
    let out = transformer_layer(tape, store, "wam.dec", z_tk, cfg.heads, None)?;
    tape.reshape(out, &[h, w, c])
}

/// Recurrent rollout: element m is the state after m+1 wam_step applications.
pub fn wam_rollout(
    tape: &mut Tape,
    store: &mut ParamStore,
    variant: Var,
    steps: usize,
    grid_cfg: &GridConfig,
    cfg: &FatgConfig,
) -> Result<Vec<Var>> {
    if steps == 0 {
        return Err(CoreError::Config("rollout needs at least one step".into()));
    }
    let mut states = Vec::with_capacity(steps);
    let mut cur = variant;
    for _ in 0..steps {
        cur = wam_step(tape, store, cur, grid_cfg, cfg)?;
        states.push(cur);
    }
    Ok(states)
}

#[derive(Debug, Clone)]
pub struct TrajectoryCandidate {
    pub anchor_index: usize,
    pub refined: Trajectory,
    /// [T, 3] offset node on the tape, for imitation losses.
    pub offsets: Var,
}

/// Eq.8–9: cross-attend the action token over the concatenated present/future
/// scene features, decode bounded offsets, refine the anchor.
pub fn decode_trajectory(
    tape: &mut Tape,
    store: &mut ParamStore,
    token: Var,
    s_t: Var,
    s_tk: Var,
    anchor: &Trajectory,
    anchor_index: usize,
    grid_cfg: &GridConfig,
    cfg: &FatgConfig,
) -> Result<TrajectoryCandidate> {
    let (h, w, c) = (grid_cfg.h, grid_cfg.w, grid_cfg.c);
    let t_len = anchor.poses.len();
    let now = tape.reshape(s_t, &[h * w, c])?;
    let fut = tape.reshape(s_tk, &[h * w, c])?;
    let s_aug = tape.concat(now, fut, 1)?;
    let kvw = tape.param(store, "fatg.dec.kv_w", &[2 * c, c], Init::Uniform);
    let kvb = tape.param(store, "fatg.dec.kv_b", &[c], Init::Uniform);
    let kv = tape.linear(s_aug, kvw, kvb)?;
    let q = tape.reshape(token, &[1, c])?;
    let ctx = tape.multi_head_attention(q, kv, kv, cfg.heads, None)?;
    let w1 = tape.param(store, "fatg.dec.mlp_w", &[c, 4 * c], Init::Uniform);
    let b1 = tape.param(store, "fatg.dec.mlp_b", &[4 * c], Init::Uniform);
    let hid = tape.linear(ctx, w1, b1)?;
    let hid = tape.relu(hid);
    let ow = tape.param(store, "fatg.dec.offset_w", &[4 * c, t_len * D_POSE], Init::Uniform);
    let ob = tape.param(store, "fatg.dec.offset_b", &[t_len * D_POSE], Init::Zeros);
    let raw = tape.linear(hid, ow, ob)?;
    // bounded offsets: zero raw input gives exactly zero offset
    let sq = tape.sigmoid(raw);
    let centered = {
        let half = tape.constant(Tensor::new(vec![1, t_len * D_POSE], vec![0.5; t_len * D_POSE])?);
        tape.sub(sq, half)?
    };
    let offsets = tape.scale(centered, 2.0 * MAX_OFFSET);
    let offsets = tape.reshape(offsets, &[t_len, D_POSE])?;

    let off = tape.value(offsets).data.clone();
    let poses: Vec<Pose> = anchor
        .poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Pose::new(p.x + off[i * 3], p.y + off[i * 3 + 1], p.heading + off[i * 3 + 2])
        })
        .collect();
    let refined = Trajectory::new(poses, anchor.dt)?;
    Ok(TrajectoryCandidate { anchor_index, refined, offsets })
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub candidates: Vec<TrajectoryCandidate>,
    /// Per-anchor variants at the current time (S_{f,t}).
    pub variants_t: Vec<Var>,
    /// Per-anchor variants after the final rollout step (S_{f,t+k}).
    pub variants_tk: Vec<Var>,
    pub tokens: Vec<Var>,
}

/// Full generator: tokens, variants, rollout, one candidate per anchor.
pub fn generate_candidates(
    tape: &mut Tape,
    store: &mut ParamStore,
    grid: Var,
    anchors: &[Trajectory],
    ego: &EgoStatus,
    rollout_steps: usize,
    grid_cfg: &GridConfig,
    cfg: &FatgConfig,
) -> Result<CandidateSet> {
    if anchors.is_empty() {
        return Err(CoreError::Contract("generate_candidates: empty vocabulary".into()));
    }
    let (variants, tokens) = build_scene_variants(tape, store, grid, anchors, ego, grid_cfg, cfg)?;
    let mut variants_tk = Vec::with_capacity(variants.len());
    for &v in &variants {
        let states = wam_rollout(tape, store, v, rollout_steps, grid_cfg, cfg)?;
        variants_tk.push(*states.last().unwrap());
    }
    let mut candidates = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let cand = decode_trajectory(
            tape,
            store,
            tokens[i],
            variants[i],
            variants_tk[i],
            anchor,
            i,
            grid_cfg,
            cfg,
        )?;
        candidates.push(cand);
    }
    Ok(CandidateSet { candidates, variants_t: variants, variants_tk, tokens })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_grid_cfg() -> GridConfig {
        GridConfig { h: 8, w: 8, lx: 8.0, ly: 8.0, c: 4 }
    }

    fn toy_anchor(t: usize) -> Trajectory {
        let poses = (0..t).map(|i| Pose::new(0.5 + i as f64 * 0.8, 0.1, 0.0)).collect();
        Trajectory::new(poses, 0.5).unwrap()
    }

    fn toy_ego() -> EgoStatus {
        EgoStatus { velocity: 5.0, acceleration: 0.0, command: Command::Straight }
    }

    fn seeded_grid(tape: &mut Tape, cfg: &GridConfig, seed: u64) -> Var {
        let mut rng = crate::rng::keyed_rng(seed, "test/grid");
        use rand::Rng;
        let data: Vec<f64> =
            (0..cfg.h * cfg.w * cfg.c).map(|_| rng.random_range(-1.0..1.0)).collect();
        tape.input(Tensor::new(vec![cfg.h, cfg.w, cfg.c], data).unwrap())
    }

    #[test]
    fn bilinear_footprint_examples() {
        let fp = bilinear_footprint(3.0, 5.0, 8, 8);
        assert_eq!(fp.cells[0], (3, 5));
        assert_eq!(fp.weights[0], 1.0);
        assert!(fp.weights.iter().sum::<f64>() - 1.0 < 1e-12);

        let fp = bilinear_footprint(2.5, 3.5, 8, 8);
        assert_eq!(fp.cells, vec![(2, 3), (2, 4), (3, 3), (3, 4)]);
        for w in &fp.weights {
            assert!((w - 0.25).abs() < 1e-12);
        }

        let fp = bilinear_footprint(2.25, 3.75, 8, 8);
        let expect = [0.1875, 0.5625, 0.0625, 0.1875];
        for (w, e) in fp.weights.iter().zip(expect) {
            assert!((w - e).abs() < 1e-12, "{w} vs {e}");
        }
    }

    #[test]
    fn footprint_clips_and_renormalizes_at_edges() {
        let fp = bilinear_footprint(7.5, 3.0, 8, 8);
        assert_eq!(fp.cells, vec![(7, 3), (7, 4)]);
        assert!((fp.weights[0] - 1.0).abs() < 1e-12);
        assert_eq!(fp.weights[1], 0.0);
        let fp = bilinear_footprint(-2.0, -2.0, 8, 8);
        assert!(fp.cells.is_empty());
    }

    #[test]
    fn zero_token_injection_is_identity() {
        let gc = toy_grid_cfg();
        let mut tape = Tape::new();
        let grid = seeded_grid(&mut tape, &gc, 0);
        let token = tape.constant(Tensor::zeros(&[gc.c]));
        let v = inject_action(&mut tape, grid, token, &toy_anchor(4), &gc).unwrap();
        assert_eq!(tape.value(v).data, tape.value(grid).data);
    }

    #[test]
    fn lattice_waypoint_changes_exactly_one_cell() {
        let gc = toy_grid_cfg();
        let mut tape = Tape::new();
        let grid = seeded_grid(&mut tape, &gc, 1);
        let token = tape.constant(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        // x=3, y=-2 projects to integer (3, 2) on the 8 m / 8 cell grid
        let anchor = Trajectory::new(
            vec![Pose::new(3.0, -2.0, 0.0), Pose::new(3.0, -2.0, 0.0)],
            0.5,
        )
        .unwrap();
        let v = inject_action(&mut tape, grid, token, &anchor, &gc).unwrap();
        let before = &tape.value(grid).data;
        let after = &tape.value(v).data;
        let mut changed = Vec::new();
        for cell in 0..gc.h * gc.w {
            if (0..gc.c).any(|ch| before[cell * gc.c + ch] != after[cell * gc.c + ch]) {
                changed.push(cell);
            }
        }
        assert_eq!(changed, vec![3 * gc.w + 2]);
        let cell = 3 * gc.w + 2;
        for ch in 0..gc.c {
            // two waypoints at the same lattice point: delta = 2 × token
            let delta = after[cell * gc.c + ch] - before[cell * gc.c + ch];
            let expect = 2.0 * [1.0, -2.0, 3.0, 0.5][ch];
            assert!((delta - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn injected_mass_is_horizon_times_token() {
        let gc = toy_grid_cfg();
        let mut tape = Tape::new();
        let grid = seeded_grid(&mut tape, &gc, 2);
        let token = tape.constant(Tensor::new(vec![4], vec![0.7, -1.3, 2.1, 0.4]).unwrap());
        let anchor = toy_anchor(4);
        let v = inject_action(&mut tape, grid, token, &anchor, &gc).unwrap();
        let before = &tape.value(grid).data;
        let after = &tape.value(v).data;
        for ch in 0..gc.c {
            let mass: f64 = (0..gc.h * gc.w)
                .map(|cell| after[cell * gc.c + ch] - before[cell * gc.c + ch])
                .sum();
            let expect = 4.0 * [0.7, -1.3, 2.1, 0.4][ch];
            assert!((mass - expect).abs() < 1e-12, "channel {ch}: {mass} vs {expect}");
        }
    }

    #[test]
    fn action_tokens_distinguish_anchors_and_ego() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let mut store = ParamStore::new(0);
        let mut tape = Tape::new();
        let a1 = toy_anchor(4);
        let mut a2 = toy_anchor(4);
        a2.poses[3].y += 1.0;
        let t1 = encode_action_token(&mut tape, &mut store, &a1, &toy_ego(), gc.c, &cfg).unwrap();
        let t2 = encode_action_token(&mut tape, &mut store, &a2, &toy_ego(), gc.c, &cfg).unwrap();
        let fast = EgoStatus { velocity: 9.0, ..toy_ego() };
        let t3 = encode_action_token(&mut tape, &mut store, &a1, &fast, gc.c, &cfg).unwrap();
        assert_eq!(tape.shape(t1), [gc.c]);
        assert_ne!(tape.value(t1).data, tape.value(t2).data);
        assert_ne!(tape.value(t1).data, tape.value(t3).data);
    }

    #[test]
    fn scene_variants_shape_and_distinctness() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let mut store = ParamStore::new(0);
        let mut tape = Tape::new();
        let grid = seeded_grid(&mut tape, &gc, 3);
        let mut a2 = toy_anchor(4);
        a2.poses[3].x += 1.5;
        let anchors = vec![toy_anchor(4), a2];
        let (variants, tokens) =
            build_scene_variants(&mut tape, &mut store, grid, &anchors, &toy_ego(), &gc, &cfg)
                .unwrap();
        assert_eq!(variants.len(), 2);
        assert_eq!(tokens.len(), 2);
        assert_eq!(tape.shape(variants[0]), [gc.h, gc.w, gc.c]);
        assert_ne!(tape.value(variants[0]).data, tape.value(variants[1]).data);
    }

    #[test]
    fn zeroed_mamba_projections_make_temporal_stage_identity() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let mut store = ParamStore::new(0);
        for i in 0..2 {
            store.set(&format!("wam.mamba{i}.out_w"), Tensor::zeros(&[gc.c, gc.c]));
            store.set(&format!("wam.mamba{i}.out_b"), Tensor::zeros(&[gc.c]));
        }
        let mut tape = Tape::new();
        let z = seeded_grid(&mut tape, &gc, 4);
        let z = tape.reshape(z, &[gc.h * gc.w, gc.c]).unwrap();
        let out = wam_temporal(&mut tape, &mut store, z, &cfg).unwrap();
        assert_eq!(tape.value(out).data, tape.value(z).data);
    }

    #[test]
    fn wam_step_shape_and_purity() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let mut store = ParamStore::new(0);
        let mut tape = Tape::new();
        let v = seeded_grid(&mut tape, &gc, 5);
        let o1 = wam_step(&mut tape, &mut store, v, &gc, &cfg).unwrap();
        let o2 = wam_step(&mut tape, &mut store, v, &gc, &cfg).unwrap();
        assert_eq!(tape.shape(o1), [gc.h, gc.w, gc.c]);
        assert_eq!(tape.value(o1).data, tape.value(o2).data);
    }

    #[test]
    fn rollout_composes_as_iterated_steps() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let mut store = ParamStore::new(0);
        let mut tape = Tape::new();
        let v = seeded_grid(&mut tape, &gc, 6);
        let states = wam_rollout(&mut tape, &mut store, v, 2, &gc, &cfg).unwrap();
        let s1 = wam_step(&mut tape, &mut store, v, &gc, &cfg).unwrap();
        let s2 = wam_step(&mut tape, &mut store, s1, &gc, &cfg).unwrap();
        assert_eq!(tape.value(states[0]).data, tape.value(s1).data);
        assert_eq!(tape.value(states[1]).data, tape.value(s2).data);
    }

    #[test]
    fn scan_memoryless_with_instant_decay() {
        let mut tape = Tape::new();
        let l = 5;
        let x1 = tape.input(Tensor::new(vec![l, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap());
        let x2 = tape.input(Tensor::new(vec![l, 1], vec![9.0, -7.0, 3.0, 4.0, 5.0]).unwrap());
        let delta = tape.constant(Tensor::new(vec![l, 1], vec![1.0; l]).unwrap());
        let b = tape.constant(Tensor::new(vec![l, 1], vec![1.0; l]).unwrap());
        let c = tape.constant(Tensor::new(vec![l, 1], vec![1.0; l]).unwrap());
        // exp(-800) underflows to exactly zero: state dies each step
        let a = tape.constant(Tensor::new(vec![1, 1], vec![-800.0]).unwrap());
        let d = tape.constant(Tensor::zeros(&[1]));
        let y1 = selective_scan(&mut tape, x1, delta, b, c, a, d).unwrap();
        let y2 = selective_scan(&mut tape, x2, delta, b, c, a, d).unwrap();
        // first two inputs differ; outputs from index 2 on must agree exactly
        assert_eq!(tape.value(y1).data[2..], tape.value(y2).data[2..]);
        assert_ne!(tape.value(y1).data[0], tape.value(y2).data[0]);
    }

    #[test]
    fn scan_matches_closed_form_geometric_sum() {
        let mut tape = Tape::new();
        let l = 6;
        let xs = vec![0.4, -1.2, 2.0, 0.3, -0.7, 1.1];
        let x = tape.input(Tensor::new(vec![l, 1], xs.clone()).unwrap());
        let (a_coef, b_coef, dt) = (0.8f64, 0.5f64, 1.0f64);
        let delta = tape.constant(Tensor::new(vec![l, 1], vec![dt; l]).unwrap());
        let b = tape.constant(Tensor::new(vec![l, 1], vec![b_coef / dt; l]).unwrap());
        let c = tape.constant(Tensor::new(vec![l, 1], vec![1.0; l]).unwrap());
        let a = tape.constant(Tensor::new(vec![1, 1], vec![a_coef.ln() / dt]).unwrap());
        let d = tape.constant(Tensor::zeros(&[1]));
        let y = selective_scan(&mut tape, x, delta, b, c, a, d).unwrap();
        let got = &tape.value(y).data;
        for i in 0..l {
            let want: f64 =
                (0..=i).map(|j| b_coef * a_coef.powi((i - j) as i32) * xs[j]).sum();
            assert!((got[i] - want).abs() < 1e-10, "y[{i}] = {} vs {want}", got[i]);
        }
    }

    #[test]
    fn scan_is_causal_under_suffix_perturbation() {
        let cfg = FatgConfig::default();
        let mut store = ParamStore::new(0);
        let (l, d) = (6, 4);
        let mut rng = crate::rng::keyed_rng(3, "test/causal");
        use rand::Rng;
        let base: Vec<f64> = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for j in 1..l {
            let mut tape = Tape::new();
            let x1 = tape.input(Tensor::new(vec![l, d], base.clone()).unwrap());
            let mut pert = base.clone();
            for v in &mut pert[j * d..] {
                *v += 0.5;
            }
            let x2 = tape.input(Tensor::new(vec![l, d], pert).unwrap());
            let y1 = mamba_scan(&mut tape, &mut store, "m", x1, &cfg).unwrap();
            let y2 = mamba_scan(&mut tape, &mut store, "m", x2, &cfg).unwrap();
            let (v1, v2) = (&tape.value(y1).data, &tape.value(y2).data);
            assert_eq!(v1[..j * d], v2[..j * d], "prefix changed at split {j}");
            assert_ne!(v1[j * d..], v2[j * d..], "suffix unaffected at split {j}");
        }
    }

    #[test]
    fn zeroed_offset_head_returns_anchor() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let anchor = toy_anchor(4);
        let t_len = anchor.poses.len();
        let mut store = ParamStore::new(0);
        store.set("fatg.dec.offset_w", Tensor::zeros(&[4 * gc.c, t_len * D_POSE]));
        store.set("fatg.dec.offset_b", Tensor::zeros(&[t_len * D_POSE]));
        let mut tape = Tape::new();
        let s_t = seeded_grid(&mut tape, &gc, 7);
        let s_tk = seeded_grid(&mut tape, &gc, 8);
        let token = tape.constant(Tensor::new(vec![gc.c], vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let cand =
            decode_trajectory(&mut tape, &mut store, token, s_t, s_tk, &anchor, 0, &gc, &cfg)
                .unwrap();
        assert_eq!(tape.shape(cand.offsets), [t_len, D_POSE]);
        for (p, q) in cand.refined.poses.iter().zip(&anchor.poses) {
            assert_eq!((p.x, p.y, p.heading), (q.x, q.y, q.heading));
        }
    }

    #[test]
    fn decoder_sees_the_future() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let anchor = toy_anchor(4);
        let mut store = ParamStore::new(0);
        let mut tape = Tape::new();
        let s_t = seeded_grid(&mut tape, &gc, 9);
        let fut_a = seeded_grid(&mut tape, &gc, 10);
        let fut_b = seeded_grid(&mut tape, &gc, 11);
        let token = tape.constant(Tensor::new(vec![gc.c], vec![0.3, -0.2, 0.9, 0.1]).unwrap());
        let ca = decode_trajectory(&mut tape, &mut store, token, s_t, fut_a, &anchor, 0, &gc, &cfg)
            .unwrap();
        let cb = decode_trajectory(&mut tape, &mut store, token, s_t, fut_b, &anchor, 0, &gc, &cfg)
            .unwrap();
        assert_ne!(tape.value(ca.offsets).data, tape.value(cb.offsets).data);
    }

    #[test]
    fn generate_candidates_full_composition() {
        let gc = toy_grid_cfg();
        let cfg = FatgConfig::default();
        let mut store = ParamStore::new(0);
        let mut tape = Tape::new();
        let grid = seeded_grid(&mut tape, &gc, 12);
        let mut a2 = toy_anchor(4);
        a2.poses[3].y += 0.8;
        let anchors = vec![toy_anchor(4), a2];
        let set = generate_candidates(
            &mut tape,
            &mut store,
            grid,
            &anchors,
            &toy_ego(),
            1,
            &gc,
            &cfg,
        )
        .unwrap();
        assert_eq!(set.candidates.len(), 2);
        for (i, c) in set.candidates.iter().enumerate() {
            assert_eq!(c.anchor_index, i);
            assert_eq!(c.refined.poses.len(), 4);
        }
        let single = generate_candidates(
            &mut tape,
            &mut store,
            grid,
            &anchors[..1],
            &toy_ego(),
            1,
            &gc,
            &cfg,
        )
        .unwrap();
        assert_eq!(single.candidates.len(), 1);
    }
}
