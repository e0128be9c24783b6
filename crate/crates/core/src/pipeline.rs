//! Run orchestration: configuration, dataset generation, two-phase training,
//! candidate evaluation with pluggable selectors, and report aggregation.

use crate::anchors::{assign, fit_anchors, AnchorVocabulary};
use crate::error::{CoreError, Result};
use crate::fatg::{
    decode_trajectory, encode_action_token, generate_candidates, inject_action, wam_step,
    CandidateSet, FatgConfig, D_POSE,
};
use crate::metrics::{evaluate, objective_tuple, MetricReport, MetricThresholds, PdmsWeights};
use crate::microworld::{
    encode_bev_features, generate_scenario, render_semantic_bev, GridConfig, ScenarioConfig,
    ScenarioFamily, ScenarioRecord, Trajectory,
};
use crate::rng::keyed_rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::vloe::{
    assemble_reasoning_sequence, critic_infer, encode_scene_tokens, encode_traj_tokens, score,
    select, tokenize_prompt, ScoreVector, VloeConfig, DEFAULT_PROMPT_TEMPLATE,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const RESULT_SCHEMA_VERSION: u32 = 1;

fn default_true_weights() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub h: usize,
    pub w: usize,
    pub lx: f64,
    pub ly: f64,
    pub c: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { h: 16, w: 16, lx: 32.0, ly: 32.0, c: 8 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonSection {
    pub steps: usize,
    pub dt: f64,
}

impl Default for HorizonSection {
    fn default() -> Self {
        HorizonSection { steps: 8, dt: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    /// Number of recurrent world-model applications.
    pub steps: usize,
    /// Seconds advanced per application.
    pub step_seconds: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection { steps: 2, step_seconds: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorSection {
    pub n: usize,
    pub max_iters: usize,
}

impl Default for AnchorSection {
    fn default() -> Self {
        AnchorSection { n: 8, max_iters: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub heads: usize,
    pub mamba_state: usize,
    pub metric_queries: usize,
    pub d_lm: usize,
    pub max_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { heads: 4, mamba_state: 8, metric_queries: 4, d_lm: 64, max_len: 128 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub ttc_horizon: f64,
    pub max_long_accel: f64,
    pub max_lat_accel: f64,
    pub max_jerk: f64,
    pub max_yaw_rate: f64,
    pub supersample: usize,
    pub ep_weight: f64,
    pub ttc_weight: f64,
    pub comf_weight: f64,
    pub extended: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let th = MetricThresholds::default();
        let w = PdmsWeights::default();
        MetricsSection {
            ttc_horizon: th.ttc_horizon,
            max_long_accel: th.max_long_accel,
            max_lat_accel: th.max_lat_accel,
            max_jerk: th.max_jerk,
            max_yaw_rate: th.max_yaw_rate,
            supersample: th.supersample,
            ep_weight: w.ep,
            ttc_weight: w.ttc,
            comf_weight: w.comf,
            extended: w.extended,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Phase-1 generator steps.
    pub steps: usize,
    /// Phase-2 evaluator steps.
    pub score_steps: usize,
    pub lr: f64,
    /// Phase-2 learning rate; the evaluator tolerates a hotter schedule.
    pub score_lr: f64,
    /// Phase-2 gradient-norm clip.
    pub score_clip: f64,
    pub clip: f64,
    #[serde(default = "default_true_weights")]
    pub w_wam: f64,
    #[serde(default = "default_true_weights")]
    pub w_imit: f64,
    #[serde(default = "default_true_weights")]
    pub w_score: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            steps: 500,
            score_steps: 4000,
            lr: 1e-2,
            score_lr: 2e-1,
            score_clip: 10.0,
            clip: 1.0,
            w_wam: 1.0,
            w_imit: 1.0,
            w_score: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub count: usize,
    pub agent_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { count: 100, agent_count: 2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub data: u64,
    pub model: u64,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection { data: 0, model: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub scenarios: String,
    pub anchors: String,
    pub checkpoint: String,
    pub results: String,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            scenarios: "scenarios.jsonl".into(),
            anchors: "anchors.jsonl".into(),
            checkpoint: "checkpoint.txt".into(),
            results: "results.jsonl".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub grid: GridSection,
    pub horizon: HorizonSection,
    pub rollout: RolloutSection,
    pub anchors: AnchorSection,
    pub model: ModelSection,
    pub metrics: MetricsSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub seeds: SeedsSection,
    pub paths: PathsSection,
    pub prompt_template: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid: GridSection::default(),
            horizon: HorizonSection::default(),
            rollout: RolloutSection::default(),
            anchors: AnchorSection::default(),
            model: ModelSection::default(),
            metrics: MetricsSection::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            seeds: SeedsSection::default(),
            paths: PathsSection::default(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CoreError::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.c < 5 {
            return Err(CoreError::Config("grid.c must be at least 5".into()));
        }
        if self.grid.c % self.model.heads != 0 || self.model.d_lm % self.model.heads != 0 {
            return Err(CoreError::Config("channel dims must divide the head count".into()));
        }
        if self.horizon.steps < 2 {
            return Err(CoreError::Config("horizon.steps must be at least 2".into()));
        }
        if self.rollout.steps == 0 {
            return Err(CoreError::Config("rollout.steps must be positive".into()));
        }
        if self.anchors.n == 0 {
            return Err(CoreError::Config("anchors.n must be positive".into()));
        }
        Ok(())
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig {
            h: self.grid.h,
            w: self.grid.w,
            lx: self.grid.lx,
            ly: self.grid.ly,
            c: self.grid.c,
        }
    }

    pub fn fatg_config(&self) -> FatgConfig {
        FatgConfig { heads: self.model.heads, mamba_state: self.model.mamba_state }
    }

    pub fn vloe_config(&self) -> VloeConfig {
        VloeConfig {
            heads: self.model.heads,
            metric_queries: self.model.metric_queries,
            d_lm: self.model.d_lm,
            max_len: self.model.max_len,
        }
    }

    pub fn thresholds(&self) -> MetricThresholds {
        MetricThresholds {
            ttc_horizon: self.metrics.ttc_horizon,
            max_long_accel: self.metrics.max_long_accel,
            max_lat_accel: self.metrics.max_lat_accel,
            max_jerk: self.metrics.max_jerk,
            max_yaw_rate: self.metrics.max_yaw_rate,
            supersample: self.metrics.supersample,
        }
    }

    pub fn pdms_weights(&self) -> PdmsWeights {
        PdmsWeights {
            ep: self.metrics.ep_weight,
            ttc: self.metrics.ttc_weight,
            comf: self.metrics.comf_weight,
            extended: self.metrics.extended,
        }
    }
}

/// Deterministic scenario set: seeds base+i, families cycled.
pub fn generate_dataset(cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<ScenarioRecord>> {
    let families = [
        ScenarioFamily::StraightRoad,
        ScenarioFamily::Intersection,
        ScenarioFamily::DenseTraffic,
    ];
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut config = ScenarioConfig::new(families[i % 3], cfg.data.agent_count);
        config.horizon = cfg.horizon.steps;
        config.dt = cfg.horizon.dt;
        out.push(generate_scenario(seed.wrapping_add(i as u64), &config)?);
    }
    Ok(out)
}

/// Train/held-out split by scenario-seed parity.
pub fn split_by_parity(scenarios: &[ScenarioRecord]) -> (Vec<&ScenarioRecord>, Vec<&ScenarioRecord>) {
    scenarios.iter().partition(|s| s.seed % 2 == 0)
}

pub fn fit_vocabulary(cfg: &RunConfig, scenarios: &[ScenarioRecord]) -> Result<AnchorVocabulary> {
    let experts: Vec<Trajectory> = scenarios.iter().map(|s| s.expert.clone()).collect();
    fit_anchors(&experts, cfg.anchors.n, cfg.anchors.max_iters, cfg.seeds.model)
}

fn feature_tensor(cfg: &RunConfig, scenario: &ScenarioRecord, t: f64) -> Result<Tensor> {
    let gc = cfg.grid_config();
    let map = render_semantic_bev(scenario, t, &gc);
    Ok(encode_bev_features(&map)?.features)
}

/// Mean over variant grids, as a plain tensor for the evaluator's shared
/// scene context.
fn mean_variants(tape: &Tape, variants: &[Var]) -> Tensor {
    let shape = tape.shape(variants[0]).to_vec();
    let mut acc = vec![0.0; shape.iter().product()];
    for &v in variants {
        for (a, x) in acc.iter_mut().zip(&tape.value(v).data) {
            *a += x;
        }
    }
    let n = variants.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Tensor { shape, data: acc }
}

/// Full generator forward pass for one scenario.
pub struct ScenarioForward {
    pub set: CandidateSet,
    pub scene_t: Tensor,
    pub scene_tk: Tensor,
}

pub fn fatg_forward(
    tape: &mut Tape,
    store: &mut ParamStore,
    cfg: &RunConfig,
    vocab: &AnchorVocabulary,
    scenario: &ScenarioRecord,
) -> Result<ScenarioForward> {
    let gc = cfg.grid_config();
    let grid = tape.input(feature_tensor(cfg, scenario, 0.0)?);
    let set = generate_candidates(
        tape,
        store,
        grid,
        &vocab.anchors,
        &scenario.ego,
        cfg.rollout.steps,
        &gc,
        &cfg.fatg_config(),
    )?;
    let scene_t = mean_variants(tape, &set.variants_t);
    let scene_tk = mean_variants(tape, &set.variants_tk);
    Ok(ScenarioForward { set, scene_t, scene_tk })
}

/// Score one candidate with the evaluator; returns its squashed logits node
/// and the extracted score vector.
pub fn score_candidate(
    tape: &mut Tape,
    store: &mut ParamStore,
    cfg: &RunConfig,
    scenario: &ScenarioRecord,
    scene_t: &Tensor,
    scene_tk: &Tensor,
    candidate: &Trajectory,
) -> Result<(Var, ScoreVector)> {
    let gc = cfg.grid_config();
    let vc = cfg.vloe_config();
    let s_t = tape.input(scene_t.clone());
    let s_tk = tape.input(scene_tk.clone());
    let scene_ctx = encode_scene_tokens(tape, store, s_t, s_tk, &gc, &vc)?;
    let traj_ctx = encode_traj_tokens(tape, store, &[candidate], gc.c, &vc)?;
    let prompt = tokenize_prompt(&cfg.prompt_template, scenario.ego.command)?;
    let seq = assemble_reasoning_sequence(tape, &prompt, Some(scene_ctx), Some(traj_ctx))?;
    let h_eval = critic_infer(tape, store, &seq, &vc)?;
    score(tape, store, h_eval, &vc)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    /// Combined phase-1 loss per step (L_wam + L_imit).
    pub generator_losses: Vec<f64>,
    /// Phase-2 score-regression loss per step.
    pub score_losses: Vec<f64>,
}

fn check_finite(loss: f64, step: usize, phase: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(CoreError::Contract(format!(
            "{phase} diverged at step {step}: loss = {loss}"
        )));
    }
    Ok(())
}

fn sgd_filtered(store: &mut ParamStore, tape: &Tape, prefixes: &[&str], lr: f64, clip: f64) {
    let grads: Vec<(&str, &[f64])> = tape
        .param_grads()
        .into_iter()
        .filter(|(name, _)| prefixes.iter().any(|p| name.starts_with(p)))
        .collect();
    store.sgd_step(&grads, lr, clip);
}

/// One phase-1 step on the expert-nearest anchor: world-model MSE against the
/// rendered future plus L1 imitation of the expert.
fn generator_step(
    cfg: &RunConfig,
    store: &mut ParamStore,
    vocab: &AnchorVocabulary,
    scenario: &ScenarioRecord,
    update: bool,
) -> Result<f64> {
    let gc = cfg.grid_config();
    let fc = cfg.fatg_config();
    let mut tape = Tape::new();
    let grid = tape.input(feature_tensor(cfg, scenario, 0.0)?);
    let idx = assign(&scenario.expert, vocab);
    let anchor = &vocab.anchors[idx];
    let token = encode_action_token(&mut tape, store, anchor, &scenario.ego, gc.c, &fc)?;
    let variant = inject_action(&mut tape, grid, token, anchor, &gc)?;

    let mut state = variant;
    let mut loss_wam: Option<Var> = None;
    for m in 1..=cfg.rollout.steps {
        state = wam_step(&mut tape, store, state, &gc, &fc)?;
        let target = tape.input(feature_tensor(cfg, scenario, m as f64 * cfg.rollout.step_seconds)?);
        let mse = tape.mse(state, target)?;
        loss_wam = Some(match loss_wam {
            Some(acc) => tape.add(acc, mse)?,
            None => mse,
        });
    }
    let loss_wam = tape.scale(loss_wam.expect("rollout.steps > 0"), 1.0 / cfg.rollout.steps as f64);

    let cand = decode_trajectory(&mut tape, store, token, variant, state, anchor, idx, &gc, &fc)?;
    let t_len = anchor.poses.len();
    let anchor_flat = tape.constant(Tensor::new(
        vec![t_len, D_POSE],
        anchor.poses.iter().flat_map(|p| [p.x, p.y, p.heading]).collect(),
    )?);
    let refined = tape.add(anchor_flat, cand.offsets)?;
    let expert_flat = tape.input(Tensor::new(
        vec![t_len, D_POSE],
        scenario.expert.poses.iter().flat_map(|p| [p.x, p.y, p.heading]).collect(),
    )?);
    let loss_imit = tape.l1(refined, expert_flat)?;

    let a = tape.scale(loss_wam, cfg.train.w_wam);
    let b = tape.scale(loss_imit, cfg.train.w_imit);
    let loss = tape.add(a, b)?;
    let loss_val = tape.value(loss).data[0];
    if update {
        tape.backward(loss)?;
        sgd_filtered(store, &tape, &["fatg.", "wam."], cfg.train.lr, cfg.train.clip);
    }
    Ok(loss_val)
}

/// Cached per-scenario material for phase 2: frozen generator outputs and
/// oracle supervision tuples.
struct ScoreSample {
    scene_t: Tensor,
    scene_tk: Tensor,
    refined: Trajectory,
    target: [f64; 4],
}

fn collect_score_samples(
    cfg: &RunConfig,
    store: &mut ParamStore,
    vocab: &AnchorVocabulary,
    scenarios: &[&ScenarioRecord],
) -> Result<Vec<(usize, ScoreSample)>> {
    let th = cfg.thresholds();
    let w = cfg.pdms_weights();
    let mut out = Vec::new();
    for (si, scenario) in scenarios.iter().enumerate() {
        let mut tape = Tape::new();
        let fwd = fatg_forward(&mut tape, store, cfg, vocab, scenario)?;
        for cand in &fwd.set.candidates {
            let report = evaluate(&cand.refined, scenario, &th, &w)?;
            out.push((
                si,
                ScoreSample {
                    scene_t: fwd.scene_t.clone(),
                    scene_tk: fwd.scene_tk.clone(),
                    refined: cand.refined.clone(),
                    target: objective_tuple(&report),
                },
            ));
        }
    }
    Ok(out)
}

/// One phase-2 step: regress the squashed score head onto the oracle tuple.
fn score_step(
    cfg: &RunConfig,
    store: &mut ParamStore,
    scenario: &ScenarioRecord,
    sample: &ScoreSample,
    update: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (squashed, _) = score_candidate(
        &mut tape,
        store,
        cfg,
        scenario,
        &sample.scene_t,
        &sample.scene_tk,
        &sample.refined,
    )?;
    let target = tape.input(Tensor::new(vec![1, 4], sample.target.to_vec())?);
    let mse = tape.mse(squashed, target)?;
    let raw = tape.scale(mse, cfg.train.w_score);
    let loss_val = tape.value(raw).data[0];
    if update {
        tape.backward(raw)?;
        sgd_filtered(store, &tape, &["vloe.", "lm."], cfg.train.score_lr, cfg.train.score_clip);
    }
    Ok(loss_val)
}

/// Forward-only phase-1 loss on one scenario; no parameter update.
pub fn generator_loss(
    cfg: &RunConfig,
    store: &mut ParamStore,
    vocab: &AnchorVocabulary,
    scenario: &ScenarioRecord,
) -> Result<f64> {
    generator_step(cfg, store, vocab, scenario, false)
}

/// Two-phase training: generator first, then the evaluator on frozen
/// generator outputs. Losses are returned per step.
pub fn train(
    cfg: &RunConfig,
    store: &mut ParamStore,
    vocab: &AnchorVocabulary,
    scenarios: &[&ScenarioRecord],
) -> Result<TrainLog> {
    if scenarios.is_empty() {
        return Err(CoreError::Config("train: empty scenario set".into()));
    }
    // materialize every parameter so zero-step runs still checkpoint fully
    generator_step(cfg, store, vocab, scenarios[0], false)?;
    {
        let mut tape = Tape::new();
        let fwd = fatg_forward(&mut tape, store, cfg, vocab, scenarios[0])?;
        let mut probe = Tape::new();
        score_candidate(
            &mut probe,
            store,
            cfg,
            scenarios[0],
            &fwd.scene_t,
            &fwd.scene_tk,
            &fwd.set.candidates[0].refined,
        )?;
    }

    let mut generator_losses = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let scenario = scenarios[step % scenarios.len()];
        let loss = generator_step(cfg, store, vocab, scenario, true)?;
        check_finite(loss, step, "generator training")?;
        generator_losses.push(loss);
    }

    let samples = collect_score_samples(cfg, store, vocab, scenarios)?;
    let mut score_losses = Vec::with_capacity(cfg.train.score_steps);
    for step in 0..cfg.train.score_steps {
        let (si, sample) = &samples[step % samples.len()];
        let loss = score_step(cfg, store, scenarios[*si], sample, true)?;
        check_finite(loss, step, "score training")?;
        score_losses.push(loss);
    }
    Ok(TrainLog { generator_losses, score_losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Vloe,
    Oracle,
    Random,
    First,
}

impl std::str::FromStr for Selector {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vloe" => Ok(Selector::Vloe),
            "oracle" => Ok(Selector::Oracle),
            "random" => Ok(Selector::Random),
            "first" => Ok(Selector::First),
            other => Err(CoreError::Config(format!(
                "unknown selector {other}; expected vloe|oracle|random|first"
            ))),
        }
    }
}

impl std::fmt::Display for Selector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Selector::Vloe => "vloe",
            Selector::Oracle => "oracle",
            Selector::Random => "random",
            Selector::First => "first",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeResult {
    pub scenario_seed: u64,
    pub selector: Selector,
    pub chosen: usize,
    pub oracle_best: usize,
    pub regret: f64,
    pub reports: Vec<MetricReport>,
}

/// Evaluator ablation switches (Table-6-style trend checks).
#[derive(Debug, Clone, Copy, Default)]
pub struct Ablation {
    /// Replace the future scene features with the present ones.
    pub bypass_future: bool,
}

pub fn evaluate_episode(
    cfg: &RunConfig,
    store: &mut ParamStore,
    vocab: &AnchorVocabulary,
    scenario: &ScenarioRecord,
    selector: Selector,
    ablation: Ablation,
) -> Result<EpisodeResult> {
    let th = cfg.thresholds();
    let w = cfg.pdms_weights();
    let mut tape = Tape::new();
    let fwd = fatg_forward(&mut tape, store, cfg, vocab, scenario)?;
    let scene_tk = if ablation.bypass_future { &fwd.scene_t } else { &fwd.scene_tk };

    let reports: Vec<MetricReport> = fwd
        .set
        .candidates
        .iter()
        .map(|c| evaluate(&c.refined, scenario, &th, &w))
        .collect::<Result<_>>()?;
    let oracle_best = {
        let pdms: Vec<f64> = reports.iter().map(|r| r.pdms).collect();
        select(&pdms)?
    };

    let chosen = match selector {
        Selector::First => 0,
        Selector::Oracle => oracle_best,
        Selector::Random => {
            let mut rng = keyed_rng(cfg.seeds.model, &format!("select/{}", scenario.seed));
            rng.random_range(0..fwd.set.candidates.len())
        }
        Selector::Vloe => {
            let mut aggs = Vec::with_capacity(fwd.set.candidates.len());
            for cand in &fwd.set.candidates {
                let mut stape = Tape::new();
                let (_, sv) = score_candidate(
                    &mut stape,
                    store,
                    cfg,
                    scenario,
                    &fwd.scene_t,
                    scene_tk,
                    &cand.refined,
                )?;
                aggs.push(sv.aggregate());
            }
            select(&aggs)?
        }
    };

    let regret = reports[oracle_best].pdms - reports[chosen].pdms;
    Ok(EpisodeResult {
        scenario_seed: scenario.seed,
        selector,
        chosen,
        oracle_best,
        regret,
        reports,
    })
}

pub fn evaluate_set(
    cfg: &RunConfig,
    store: &mut ParamStore,
    vocab: &AnchorVocabulary,
    scenarios: &[&ScenarioRecord],
    selector: Selector,
    ablation: Ablation,
) -> Result<Vec<EpisodeResult>> {
    scenarios
        .iter()
        .map(|s| evaluate_episode(cfg, store, vocab, s, selector, ablation))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_pdms: f64,
    pub mean_regret: f64,
    /// Mean pass rate of each sub-metric for the chosen candidates, in
    /// (nc, dac, ttc, ep, comf, ddc, lk, tlc) order.
    pub pass_rates: [f64; 8],
}

pub fn summarize(results: &[EpisodeResult]) -> EvalSummary {
    let n = results.len();
    if n == 0 {
        return EvalSummary { episodes: 0, mean_pdms: 0.0, mean_regret: 0.0, pass_rates: [0.0; 8] };
    }
    let mut pdms = 0.0;
    let mut regret = 0.0;
    let mut rates = [0.0; 8];
    for r in results {
        let chosen = &r.reports[r.chosen];
        pdms += chosen.pdms;
        regret += r.regret;
        for (acc, v) in rates.iter_mut().zip([
            chosen.nc, chosen.dac, chosen.ttc, chosen.ep, chosen.comf, chosen.ddc, chosen.lk,
            chosen.tlc,
        ]) {
            *acc += v;
        }
    }
    let nf = n as f64;
    for r in &mut rates {
        *r /= nf;
    }
    EvalSummary {
        episodes: n,
        mean_pdms: pdms / nf,
        mean_regret: regret / nf,
        pass_rates: rates,
    }
}

/// Table-style text report, percentages with one decimal.
pub fn render_report(summary: &EvalSummary) -> String {
    let p = |v: f64| format!("{:.1}", v * 100.0);
    let mut out = String::new();
    out.push_str("episodes  NC     DAC    TTC    EP     Comf   DDC    LK     TLC    PDMS\n");
    out.push_str(&format!(
        "{:<9} {:<6} {:<6} {:<6} {:<6} {:<6} {:<6} {:<6} {:<6} {:<6}\n",
        summary.episodes,
        p(summary.pass_rates[0]),
        p(summary.pass_rates[1]),
        p(summary.pass_rates[2]),
        p(summary.pass_rates[3]),
        p(summary.pass_rates[4]),
        p(summary.pass_rates[5]),
        p(summary.pass_rates[6]),
        p(summary.pass_rates[7]),
        p(summary.mean_pdms),
    ));
    out.push_str(&format!("mean regret: {:.4}\n", summary.mean_regret));
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ResultLine {
    Header { schema_version: u32 },
    Episode(EpisodeResult),
    Summary(EvalSummary),
}

pub fn save_results(path: &Path, results: &[EpisodeResult]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = ResultLine::Header { schema_version: RESULT_SCHEMA_VERSION };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for r in results {
        let line = ResultLine::Episode(r.clone());
        writeln!(w, "{}", serde_json::to_string(&line).expect("episode serializes"))?;
    }
    let summary = ResultLine::Summary(summarize(results));
    writeln!(w, "{}", serde_json::to_string(&summary).expect("summary serializes"))?;
    w.flush()?;
    Ok(())
}

pub fn load_results(path: &Path) -> Result<(Vec<EpisodeResult>, Option<EvalSummary>)> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut episodes = Vec::new();
    let mut summary = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let parsed: ResultLine = serde_json::from_str(&line?)
            .map_err(|e| CoreError::Parse { line: line_no, msg: format!("bad result line: {e}") })?;
        match parsed {
            ResultLine::Header { schema_version } if line_no == 1 => {
                if schema_version != RESULT_SCHEMA_VERSION {
                    return Err(CoreError::Parse {
                        line: 1,
                        msg: format!("unsupported result schema {schema_version}"),
                    });
                }
            }
            ResultLine::Header { .. } => {
                return Err(CoreError::Parse { line: line_no, msg: "misplaced header".into() })
            }
            ResultLine::Episode(e) => episodes.push(e),
            ResultLine::Summary(s) => summary = Some(s),
        }
    }
    Ok((episodes, summary))
}
