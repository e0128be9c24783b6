//! VLM-oriented evaluator: scene/trajectory token encoders, reasoning-sequence
//! assembly with sentinel substitution, a stub causal-LM critic, and the
//! multi-objective score head.

use crate::error::{CoreError, Result};
use crate::microworld::{Command, GridConfig, Trajectory};
use crate::nn::{attention_sublayer, linear_relu_norm, LN_EPS};
use crate::tensor::{Init, ParamStore, Tape, Tensor, Var};

/// Reserved sentinel ids in prompt token streams.
pub const SCENE_SENTINEL: i64 = -200;
pub const TRAJ_SENTINEL: i64 = -201;

/// Fixed 64-word critic vocabulary; the score token is one extra row.
pub const WORDS: [&str; 64] = [
    "evaluate", "the", "candidate", "trajectory", "for", "command", "left", "straight",
    "right", "given", "scene", "context", "and", "future", "rollout", "then", "score",
    "it", "now", "ego", "vehicle", "agent", "lane", "road", "signal", "red", "green",
    "stop", "go", "turn", "drive", "speed", "slow", "fast", "safe", "unsafe", "comfort",
    "efficiency", "compliance", "safety", "progress", "collision", "drivable", "area",
    "keeping", "direction", "traffic", "light", "time", "distance", "path", "plan",
    "select", "best", "worst", "with", "without", "of", "to", "at", "on", "in", "is", "a",
];

pub const SCORE_TOKEN: usize = WORDS.len();

pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "evaluate the candidate trajectory for command <cmd> given scene <scene> and candidate <traj> then score it";

#[derive(Debug, Clone, Copy)]
pub struct VloeConfig {
    pub heads: usize,
    /// K learnable metric queries.
    pub metric_queries: usize,
    pub d_lm: usize,
    pub max_len: usize,
}

impl Default for VloeConfig {
    fn default() -> Self {
        VloeConfig { heads: 4, metric_queries: 4, d_lm: 64, max_len: 128 }
    }
}

/// Map template text to token ids, substituting `<cmd>` with the command word
/// and passing `<scene>`/`<traj>` through as sentinel ids.
pub fn tokenize_prompt(template: &str, command: Command) -> Result<Vec<i64>> {
    let cmd_word = match command {
        Command::Left => "left",
        Command::Straight => "straight",
        Command::Right => "right",
    };
    let mut ids = Vec::new();
    for word in template.split_whitespace() {
        let word = if word == "<cmd>" { cmd_word } else { word };
        match word {
            "<scene>" => ids.push(SCENE_SENTINEL),
            "<traj>" => ids.push(TRAJ_SENTINEL),
            w => {
                let id = WORDS
                    .iter()
                    .position(|v| *v == w)
                    .ok_or_else(|| CoreError::Config(format!("word not in vocabulary: {w}")))?;
                ids.push(id as i64);
            }
        }
    }
    Ok(ids)
}

/// Eq.10–11: channel-concat present and future grids, compress spatially with
/// two stride-4 convolutions, project, and refine with self-attention.
pub fn encode_scene_tokens(
    tape: &mut Tape,
    store: &mut ParamStore,
    s_t: Var,
    s_tk: Var,
    grid_cfg: &GridConfig,
    cfg: &VloeConfig,
) -> Result<Var> {
    if tape.shape(s_t) != tape.shape(s_tk) {
        return Err(CoreError::Dimension(format!(
            "encode_scene_tokens: {:?} vs {:?}",
            tape.shape(s_t),
            tape.shape(s_tk)
        )));
    }
    let (h, w, c) = (grid_cfg.h, grid_cfg.w, grid_cfg.c);
    let now = tape.reshape(s_t, &[h * w, c])?;
    let fut = tape.reshape(s_tk, &[h * w, c])?;
    let cat = tape.concat(now, fut, 1)?;
    // channel-first for the convolutions
    let cat = tape.transpose(cat)?;
    let cat = tape.reshape(cat, &[2 * c, h, w])?;
    let k1 = tape.param(store, "vloe.scene.conv1_k", &[c, 2 * c, 4, 4], Init::Uniform);
    let z = tape.conv2d(cat, k1, 4)?;
    let z = tape.relu(z);
    let zs = tape.shape(z).to_vec();
    let k2 = tape.param(store, "vloe.scene.conv2_k", &[c, c, 4, 4], Init::Uniform);
    let z = tape.conv2d(z, k2, 4)?;
    let z = tape.relu(z);
    let zs = {
        let s = tape.shape(z).to_vec();
        debug_assert_eq!(s[0], c);
        debug_assert!(zs[0] == c);
        s
    };
    let n_s = zs[1] * zs[2];
    let z = tape.reshape(z, &[c, n_s])?;
    let tokens = tape.transpose(z)?;
    let tokens = linear_relu_norm(tape, store, "vloe.scene", tokens, c)?;
    attention_sublayer(tape, store, "vloe.scene.attn", tokens, cfg.heads, None)
}

/// Eq.12–13: project candidate trajectories to tokens and cross-attend the
/// learned metric queries over them.
pub fn encode_traj_tokens(
    tape: &mut Tape,
    store: &mut ParamStore,
    candidates: &[&Trajectory],
    c: usize,
    cfg: &VloeConfig,
) -> Result<Var> {
    if candidates.is_empty() {
        return Err(CoreError::Contract("encode_traj_tokens: no candidates".into()));
    }
    let t_len = candidates[0].poses.len();
    let mut flat = Vec::with_capacity(candidates.len() * t_len * 3);
    for cand in candidates {
        if cand.poses.len() != t_len {
            return Err(CoreError::Dimension(format!(
                "encode_traj_tokens: horizons {} vs {t_len}",
                cand.poses.len()
            )));
        }
        flat.extend(cand.poses.iter().flat_map(|p| [p.x, p.y, p.heading]));
    }
    let x = tape.input(Tensor::new(vec![candidates.len(), t_len * 3], flat)?);
    let tokens = linear_relu_norm(tape, store, "vloe.traj", x, c)?;
    let q = tape.param(store, "vloe.traj.q_metric", &[cfg.metric_queries, c], Init::Uniform);
    tape.multi_head_attention(q, tokens, tokens, cfg.heads, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqItem {
    /// Ordinary vocabulary id (the score token included).
    Token(usize),
    /// Row index into the scene context.
    Scene(usize),
    /// Row index into the trajectory context.
    Traj(usize),
}

#[derive(Debug, Clone)]
pub struct ReasoningSequence {
    pub items: Vec<SeqItem>,
    pub scene: Option<Var>,
    pub traj: Option<Var>,
    /// Lower-triangular L×L causal mask, row-major.
    pub mask: Vec<bool>,
    pub score_pos: usize,
}

impl ReasoningSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn count_sentinels(prompt: &[i64], id: i64) -> usize {
    prompt.iter().filter(|&&t| t == id).count()
}

/// Expand sentinel ids into injected embedding slots and append the score
/// token. Each `<scene>`/`<traj>` placeholder expands to the full context.
pub fn assemble_reasoning_sequence(
    tape: &Tape,
    prompt: &[i64],
    scene: Option<Var>,
    traj: Option<Var>,
) -> Result<ReasoningSequence> {
    let scene_ph = count_sentinels(prompt, SCENE_SENTINEL);
    let traj_ph = count_sentinels(prompt, TRAJ_SENTINEL);
    let want_scene = usize::from(scene.is_some());
    let want_traj = usize::from(traj.is_some());
    if scene_ph != want_scene {
        return Err(CoreError::Contract(format!(
            "assembly: {scene_ph} scene placeholders for {want_scene} scene contexts"
        )));
    }
    if traj_ph != want_traj {
        return Err(CoreError::Contract(format!(
            "assembly: {traj_ph} trajectory placeholders for {want_traj} trajectory contexts"
        )));
    }
    let mut items = Vec::new();
    for &id in prompt {
        match id {
            SCENE_SENTINEL => {
                let n = tape.shape(scene.unwrap())[0];
                items.extend((0..n).map(SeqItem::Scene));
            }
            TRAJ_SENTINEL => {
                let n = tape.shape(traj.unwrap())[0];
                items.extend((0..n).map(SeqItem::Traj));
            }
            id if id >= 0 && (id as usize) < WORDS.len() => items.push(SeqItem::Token(id as usize)),
            id => {
                return Err(CoreError::Contract(format!("assembly: unknown token id {id}")));
            }
        }
    }
    items.push(SeqItem::Token(SCORE_TOKEN));
    let l = items.len();
    let mut mask = vec![false; l * l];
    for i in 0..l {
        for j in 0..=i {
            mask[i * l + j] = true;
        }
    }
    Ok(ReasoningSequence { items, scene, traj, mask, score_pos: l - 1 })
}

/// Final-layer hidden states of the stub causal LM over the mixed sequence.
pub fn critic_hidden(
    tape: &mut Tape,
    store: &mut ParamStore,
    seq: &ReasoningSequence,
    cfg: &VloeConfig,
) -> Result<Var> {
    let l = seq.items.len();
    if l > cfg.max_len {
        return Err(CoreError::Contract(format!(
            "sequence length {l} exceeds critic maximum {}",
            cfg.max_len
        )));
    }
    let d = cfg.d_lm;
    let embed =
        tape.param(store, "lm.embed", &[WORDS.len() + 1, d], Init::Uniform);
    let scene_adapted = match seq.scene {
        Some(s) => {
            let c = *tape.shape(s).last().unwrap();
            let w = tape.param(store, "lm.scene_adapt_w", &[c, d], Init::Uniform);
            let b = tape.param(store, "lm.scene_adapt_b", &[d], Init::Uniform);
            Some(tape.linear(s, w, b)?)
        }
        None => None,
    };
    let traj_adapted = match seq.traj {
        Some(t) => {
            let c = *tape.shape(t).last().unwrap();
            let w = tape.param(store, "lm.traj_adapt_w", &[c, d], Init::Uniform);
            let b = tape.param(store, "lm.traj_adapt_b", &[d], Init::Uniform);
            Some(tape.linear(t, w, b)?)
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(l);
    for item in &seq.items {
        let row = match *item {
            SeqItem::Token(id) => tape.gather_rows(embed, &[id])?,
            SeqItem::Scene(i) => tape.slice_rows(scene_adapted.expect("scene present"), i, 1)?,
            SeqItem::Traj(i) => tape.slice_rows(traj_adapted.expect("traj present"), i, 1)?,
        };
        rows.push(row);
    }
    let x = tape.concat_rows(&rows)?;
    let pos = tape.param(store, "lm.pos", &[cfg.max_len, d], Init::Uniform);
    let pos = tape.slice_rows(pos, 0, l)?;
    let mut x = tape.add(x, pos)?;
    for layer in 0..2 {
        x = crate::nn::transformer_layer(
            tape,
            store,
            &format!("lm.layer{layer}"),
            x,
            cfg.heads,
            Some(&seq.mask),
        )?;
    }
    let g = tape.param(store, "lm.final_g", &[d], Init::Uniform);
    let b = tape.param(store, "lm.final_b", &[d], Init::Zeros);
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Eq.14: hidden state of the score token.
pub fn critic_infer(
    tape: &mut Tape,
    store: &mut ParamStore,
    seq: &ReasoningSequence,
    cfg: &VloeConfig,
) -> Result<Var> {
    let hidden = critic_hidden(tape, store, seq, cfg)?;
    let h = tape.slice_rows(hidden, seq.score_pos, 1)?;
    tape.reshape(h, &[cfg.d_lm])
}

/// Squashed per-objective scores with their PDMS-style aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreVector {
    pub safety: f64,
    pub comfort: f64,
    pub efficiency: f64,
    pub compliance: f64,
}

impl ScoreVector {
    /// PDMS-shaped composition: hard factors × weighted soft average.
    pub fn aggregate(&self) -> f64 {
        self.safety
            * self.compliance
            * (5.0 * self.efficiency + 5.0 * self.safety + 2.0 * self.comfort)
            / 12.0
    }
}

/// Eq.15: linear head over h_eval, sigmoid-squashed to four objectives.
/// Objective order: safety, comfort, efficiency, compliance.
pub fn score(
    tape: &mut Tape,
    store: &mut ParamStore,
    h_eval: Var,
    cfg: &VloeConfig,
) -> Result<(Var, ScoreVector)> {
    let h = tape.reshape(h_eval, &[1, cfg.d_lm])?;
    let w = tape.param(store, "lm.score_w", &[cfg.d_lm, 4], Init::Uniform);
    let b = tape.param(store, "lm.score_b", &[4], Init::Zeros);
    let logits = tape.linear(h, w, b)?;
    let squashed = tape.sigmoid(logits);
    let v = &tape.value(squashed).data;
    let sv = ScoreVector { safety: v[0], comfort: v[1], efficiency: v[2], compliance: v[3] };
    Ok((squashed, sv))
}

/// Argmax over aggregates; ties resolve to the lowest index.
pub fn select(aggregates: &[f64]) -> Result<usize> {
    if aggregates.is_empty() {
        return Err(CoreError::Contract("select: no candidates".into()));
    }
    let mut best = 0;
    for (i, a) in aggregates.iter().enumerate() {
        if *a > aggregates[best] {
            best = i;
        }
    }
    Ok(best)
}
