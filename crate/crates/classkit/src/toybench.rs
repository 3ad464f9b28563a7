//! Deterministic 2D benchmark environments with controllable observation
//! heterogeneity, scripted experts, demo collection, closed-loop evaluation,
//! and the ablation harness.
//!
//! The structural premise: actions are always expressed in the world frame,
//! while observations may be rotated by a per-episode (or drifting) frame
//! angle and padded with nuisance appearance features. Episodes with the
//! same world geometry therefore share action sequences even when their
//! observation streams look completely different.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demo::{enumerate_windows, Dataset, DemoError, Demonstration};
use crate::dtw::{SeqDistanceConfig, SeqMetric};
use crate::encoder::EncoderSpec;
use crate::mining::{build_soft_weights, fit_cdf, mine_pairs, MiningError};
use crate::retrieval::{
    build_latent_index, Controller, QueryConfig, RetrievalController, RetrievalError,
};
use crate::trainer::{train_class, TrainConfig, TrainError};

pub const WORKSPACE_MIN: f64 = 0.0;
pub const WORKSPACE_MAX: f64 = 1.0;
/// Margin used when sampling initial positions so geometry stays playable.
const SPAWN_MARGIN: f64 = 0.1;
/// Agent/block contact distance for the pushing task.
pub const CONTACT_DIST: f64 = 0.08;
/// World-frame landmark observed (rotated) in every scene; anchors the
/// observation frame so world geometry stays recoverable from observations.
const LANDMARK: [f64; 2] = [1.0, 0.0];

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("step called after episode finished")]
    StepAfterDone,
    #[error("action must be a 2-vector, got dim {0}")]
    BadActionDim(usize),
    #[error("expert failure rate {failed}/{attempts} exceeds 50%")]
    ExpertFailing { failed: usize, attempts: usize },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PointReach,
    DiscPush,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hetero {
    Fixed,
    RandRot,
    DynRot,
    RandAppearance,
}

impl Hetero {
    pub fn tag(&self) -> &'static str {
        match self {
            Hetero::Fixed => "fixed",
            Hetero::RandRot => "rand_rot",
            Hetero::DynRot => "dyn_rot",
            Hetero::RandAppearance => "rand_appearance",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub task: Task,
    pub hetero: Hetero,
    /// Frame drift per step (radians) under `DynRot`.
    pub dyn_rot_rate: f64,
    pub appearance_dim: usize,
    pub success_radius: f64,
    pub max_steps: usize,
    pub action_clip: f64,
}

impl EnvConfig {
    pub fn new(task: Task, hetero: Hetero) -> Self {
        EnvConfig {
            task,
            hetero,
            dyn_rot_rate: 0.5_f64.to_radians(),
            appearance_dim: 4,
            success_radius: 0.05,
            max_steps: 200,
            action_clip: 0.05,
        }
    }

    pub fn validate(&self) -> Result<(), ToyError> {
        let mut problems = Vec::new();
        if !(self.dyn_rot_rate.is_finite() && self.dyn_rot_rate > 0.0) {
            problems.push("dyn_rot_rate must be positive".to_string());
        }
        if !(self.success_radius.is_finite() && self.success_radius > 0.0) {
            problems.push("success_radius must be positive".to_string());
        }
        if !(self.action_clip.is_finite() && self.action_clip > 0.0) {
            problems.push("action_clip must be positive".to_string());
        }
        if self.max_steps == 0 {
            problems.push("max_steps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ToyError::InvalidConfig(problems.join("; ")))
        }
    }

    /// Observation dimensionality: rotated 2-vector feature groups plus the
    /// appearance tail.
    pub fn obs_dim(&self) -> usize {
        let groups = match self.task {
            Task::PointReach => 4,  // agent, goal, goal-agent, landmark
            Task::DiscPush => 7,    // + block, block-agent, goal-block
        };
        2 * groups + self.appearance_dim
    }

    pub fn proprio_dim(&self) -> usize {
        2
    }

    pub fn action_dim(&self) -> usize {
        2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agent_pos: [f64; 2],
    pub goal_pos: [f64; 2],
    pub block_pos: Option<[f64; 2]>,
    pub theta: f64,
    pub appearance: Vec<f64>,
    pub step: usize,
    pub done: bool,
    pub success: bool,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn rotate(theta: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = theta.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

fn clamp_workspace(p: [f64; 2]) -> [f64; 2] {
    [
        p[0].clamp(WORKSPACE_MIN, WORKSPACE_MAX),
        p[1].clamp(WORKSPACE_MIN, WORKSPACE_MAX),
    ]
}

fn clip_action(action: [f64; 2], clip: f64) -> [f64; 2] {
    let norm = (action[0] * action[0] + action[1] * action[1]).sqrt();
    if norm > clip {
        [action[0] * clip / norm, action[1] * clip / norm]
    } else {
        action
    }
}

fn sample_pos(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let lo = WORKSPACE_MIN + SPAWN_MARGIN;
    let hi = WORKSPACE_MAX - SPAWN_MARGIN;
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

fn task_object(state: &EnvState) -> [f64; 2] {
    state.block_pos.unwrap_or(state.agent_pos)
}

/// Current observation: each 2D scene feature rotated by theta, then the
/// appearance tail.
pub fn observe(cfg: &EnvConfig, state: &EnvState) -> Vec<f64> {
    let a = state.agent_pos;
    let g = state.goal_pos;
    let mut groups: Vec<[f64; 2]> = vec![a, g, [g[0] - a[0], g[1] - a[1]], LANDMARK];
    if let Some(b) = state.block_pos {
        groups.push(b);
        groups.push([b[0] - a[0], b[1] - a[1]]);
        groups.push([g[0] - b[0], g[1] - b[1]]);
    }
    let mut obs = Vec::with_capacity(cfg.obs_dim());
    for v in groups {
        let r = rotate(state.theta, v);
        obs.push(r[0]);
        obs.push(r[1]);
    }
    obs.extend_from_slice(&state.appearance);
    obs
}

/// Rotation-free ego state: the agent's world position. Carries no goal or
/// block information by design.
pub fn proprio(state: &EnvState) -> Vec<f64> {
    state.agent_pos.to_vec()
}

/// Samples a fresh episode. Goal and task object are separated by at least
/// three success radii so no episode is trivially solved at reset.
pub fn reset(cfg: &EnvConfig, seed: u64) -> Result<(EnvState, Vec<f64>, Vec<f64>), ToyError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let agent_pos = sample_pos(&mut rng);
    let (goal_pos, block_pos) = loop {
        let goal = sample_pos(&mut rng);
        match cfg.task {
            Task::PointReach => {
                if dist(goal, agent_pos) > 3.0 * cfg.success_radius {
                    break (goal, None);
                }
            }
            Task::DiscPush => {
                let block = sample_pos(&mut rng);
                if dist(goal, block) > 3.0 * cfg.success_radius
                    && dist(block, agent_pos) > CONTACT_DIST
                {
                    break (goal, Some(block));
                }
            }
        }
    };
    let theta = match cfg.hetero {
        Hetero::Fixed | Hetero::RandAppearance => 0.0,
        Hetero::RandRot | Hetero::DynRot => rng.gen_range(0.0..std::f64::consts::TAU),
    };
    let appearance = match cfg.hetero {
        Hetero::RandAppearance => (0..cfg.appearance_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
        _ => vec![0.0; cfg.appearance_dim],
    };
    let state = EnvState {
        agent_pos,
        goal_pos,
        block_pos,
        theta,
        appearance,
        step: 0,
        done: false,
        success: false,
    };
    let obs = observe(cfg, &state);
    let pro = proprio(&state);
    Ok((state, obs, pro))
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub proprio: Vec<f64>,
    pub done: bool,
    pub success: bool,
}

/// Advances the environment by one world-frame action.
pub fn step(cfg: &EnvConfig, state: &mut EnvState, action: &[f64]) -> Result<StepOutcome, ToyError> {
    if state.done {
        return Err(ToyError::StepAfterDone);
    }
    if action.len() != 2 {
        return Err(ToyError::BadActionDim(action.len()));
    }
    let a = clip_action([action[0], action[1]], cfg.action_clip);
    state.agent_pos = clamp_workspace([state.agent_pos[0] + a[0], state.agent_pos[1] + a[1]]);
    if let Some(block) = state.block_pos {
        let d = dist(state.agent_pos, block);
        if d < CONTACT_DIST {
            let n = if d > 1e-12 {
                [
                    (block[0] - state.agent_pos[0]) / d,
                    (block[1] - state.agent_pos[1]) / d,
                ]
            } else {
                [1.0, 0.0]
            };
            let push = CONTACT_DIST - d;
            state.block_pos = Some(clamp_workspace([
                block[0] + n[0] * push,
                block[1] + n[1] * push,
            ]));
        }
    }
    state.step += 1;
    if matches!(cfg.hetero, Hetero::DynRot) {
        state.theta = (state.theta + cfg.dyn_rot_rate).rem_euclid(std::f64::consts::TAU);
    }
    state.success = dist(task_object(state), state.goal_pos) <= cfg.success_radius;
    state.done = state.success || state.step >= cfg.max_steps;
    Ok(StepOutcome {
        obs: observe(cfg, state),
        proprio: proprio(state),
        done: state.done,
        success: state.success,
    })
}

/// Privileged-state expert used to generate demonstrations. World-frame,
/// proportional for reaching; approach-behind-then-push for the disc task.
pub fn scripted_expert(
    cfg: &EnvConfig,
    state: &EnvState,
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> [f64; 2] {
    let agent = state.agent_pos;
    let goal = state.goal_pos;
    let mut action = match state.block_pos {
        None => [goal[0] - agent[0], goal[1] - agent[1]],
        Some(block) => {
            let bg = dist(block, goal).max(1e-9);
            let dir_bg = [(goal[0] - block[0]) / bg, (goal[1] - block[1]) / bg];
            let ab = dist(agent, block).max(1e-9);
            let radial = [(agent[0] - block[0]) / ab, (agent[1] - block[1]) / ab];
            // alignment of the agent with the pushing cone behind the block
            let behind = -(radial[0] * dir_bg[0] + radial[1] * dir_bg[1]);
            let ring = CONTACT_DIST + 0.02;
            if behind > 0.95 && ab < CONTACT_DIST + 0.04 {
                // in position: drive through the block toward the goal
                dir_bg
            } else if ab > ring + 0.01 {
                // approach radially to a standoff ring around the block
                [-radial[0] * (ab - ring), -radial[1] * (ab - ring)]
            } else {
                // orbit the ring toward the point behind the block, with a
                // radial correction to hold the standoff distance
                let cross = radial[0] * (-dir_bg[1]) - radial[1] * (-dir_bg[0]);
                let tangent = if cross >= 0.0 {
                    [-radial[1], radial[0]]
                } else {
                    [radial[1], -radial[0]]
                };
                let hold = 20.0 * (ring - ab);
                [
                    tangent[0] + radial[0] * hold,
                    tangent[1] + radial[1] * hold,
                ]
            }
        }
    };
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("valid noise std");
        action[0] += normal.sample(rng);
        action[1] += normal.sample(rng);
    }
    clip_action(action, cfg.action_clip)
}


#[derive(Debug, Clone)]
pub struct TrajStep {
    pub obs: Vec<f64>,
    pub proprio: Vec<f64>,
    pub action: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub initial: EnvState,
    pub trajectory: Vec<TrajStep>,
}

/// Runs one expert episode from the given reset seed.
pub fn expert_episode(
    cfg: &EnvConfig,
    seed: u64,
    noise_std: f64,
) -> Result<EpisodeResult, ToyError> {
    let (mut state, mut obs, mut pro) = reset(cfg, seed)?;
    let initial = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut trajectory = Vec::new();
    while !state.done {
        let action = scripted_expert(cfg, &state, noise_std, &mut rng);
        trajectory.push(TrajStep {
            obs: obs.clone(),
            proprio: pro.clone(),
            action: action.to_vec(),
        });
        let out = step(cfg, &mut state, &action)?;
        obs = out.obs;
        pro = out.proprio;
    }
    Ok(EpisodeResult {
        success: state.success,
        steps: state.step,
        initial,
        trajectory,
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.17e}")
}

/// Collects `n` successful expert episodes as a dataset. Failed episodes are
/// resampled; a sustained failure rate above 50% aborts.
pub fn collect_demos(
    cfg: &EnvConfig,
    n: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset, ToyError> {
    cfg.validate()?;
    if n == 0 {
        return Err(ToyError::InvalidConfig("n must be at least 1".into()));
    }
    let mut demos = Vec::with_capacity(n);
    let mut attempts = 0usize;
    let mut failed = 0usize;
    let mut next_seed = seed;
    while demos.len() < n {
        attempts += 1;
        let ep_seed = mix64(seed, next_seed);
        next_seed = next_seed.wrapping_add(1);
        let ep = expert_episode(cfg, ep_seed, noise_std)?;
        if !ep.success || ep.trajectory.is_empty() {
            failed += 1;
            if attempts >= 20 && failed * 2 > attempts {
                return Err(ToyError::ExpertFailing { failed, attempts });
            }
            continue;
        }
        let mut meta = BTreeMap::new();
        meta.insert("success".to_string(), "true".to_string());
        meta.insert("theta0".to_string(), fmt_f64(ep.initial.theta));
        let rate = if matches!(cfg.hetero, Hetero::DynRot) {
            cfg.dyn_rot_rate
        } else {
            0.0
        };
        meta.insert("theta_rate".to_string(), fmt_f64(rate));
        meta.insert(
            "appearance".to_string(),
            ep.initial
                .appearance
                .iter()
                .map(|x| fmt_f64(*x))
                .collect::<Vec<_>>()
                .join(","),
        );
        demos.push(Demonstration {
            id: format!("ep-{:016x}", ep_seed),
            observations: ep.trajectory.iter().map(|s| s.obs.clone()).collect(),
            proprio: ep.trajectory.iter().map(|s| s.proprio.clone()).collect(),
            actions: ep.trajectory.iter().map(|s| s.action.clone()).collect(),
            meta,
        });
    }
    Ok(Dataset::new(demos)?)
}

/// Deterministic stream splitter for episode seeds.
pub fn mix64(a: u64, b: u64) -> u64 {
    let mut x = a
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b)
        .wrapping_add(0x2545_f491_4f6c_dd1d);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Policies runnable in closed loop. Controllers see only (obs, proprio);
/// the scripted expert gets privileged state access for validation purposes.
/// The random baseline commits to one task-blind direction per episode.
pub enum Policy<'a> {
    Controller(&'a mut dyn Controller),
    Scripted { noise_std: f64 },
    Random,
}

/// Rolls out one episode; controllers re-plan every `execute_horizon`
/// steps (the chunk length they emit).
pub fn rollout(
    cfg: &EnvConfig,
    seed: u64,
    policy: &mut Policy,
) -> Result<EpisodeResult, ToyError> {
    let (mut state, mut obs, mut pro) = reset(cfg, seed)?;
    let initial = state.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
    let random_dir = {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        [cfg.action_clip * angle.cos(), cfg.action_clip * angle.sin()]
    };
    let mut trajectory = Vec::new();
    'outer: while !state.done {
        let chunk: Vec<Vec<f64>> = match policy {
            Policy::Controller(ctrl) => ctrl.plan(&obs, &pro)?,
            Policy::Scripted { noise_std } => {
                vec![scripted_expert(cfg, &state, *noise_std, &mut rng).to_vec()]
            }
            Policy::Random => vec![random_dir.to_vec()],
        };
        for action in chunk {
            trajectory.push(TrajStep {
                obs: obs.clone(),
                proprio: pro.clone(),
                action: action.clone(),
            });
            let out = step(cfg, &mut state, &action)?;
            obs = out.obs;
            pro = out.proprio;
            if state.done {
                break 'outer;
            }
        }
    }
    Ok(EpisodeResult {
        success: state.success,
        steps: state.step,
        initial,
        trajectory,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub episodes: usize,
}

/// Evaluates a policy over `episodes` rollouts for each seed, with disjoint
/// deterministic episode streams. Identical policy and seeds give an
/// identical report.
pub fn evaluate(
    cfg: &EnvConfig,
    policy: &mut Policy,
    episodes: usize,
    seeds: &[u64],
) -> Result<EvalReport, ToyError> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut successes = 0usize;
        for ep in 0..episodes {
            let ep_seed = mix64(seed, ep as u64);
            let result = rollout(cfg, ep_seed, policy)?;
            if result.success {
                successes += 1;
            }
        }
        per_seed.push(successes as f64 / episodes as f64);
    }
    let mean = per_seed.iter().sum::<f64>() / per_seed.len().max(1) as f64;
    Ok(EvalReport {
        per_seed,
        mean,
        episodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Soft,
    Hard,
}

impl Weighting {
    pub fn tag(&self) -> &'static str {
        match self {
            Weighting::Soft => "soft",
            Weighting::Hard => "hard",
        }
    }
}

/// One ablation cell: which similarity machinery variant to train with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub weighting: Weighting,
    pub window: usize,
    pub metric: SeqMetric,
    pub k_quantile: f64,
}

/// Axis grid; rows are the Cartesian product of the four axes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub weightings: Vec<Weighting>,
    pub windows: Vec<usize>,
    pub metrics: Vec<SeqMetric>,
    pub k_quantiles: Vec<f64>,
}

impl AblationGrid {
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &weighting in &self.weightings {
            for &window in &self.windows {
                for &metric in &self.metrics {
                    for &k_quantile in &self.k_quantiles {
                        out.push(AblationCell {
                            weighting,
                            window,
                            metric,
                            k_quantile,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Shared setup for an ablation sweep.
#[derive(Debug, Clone)]
pub struct AblationBase {
    pub env_fixed: EnvConfig,
    pub env_hetero: EnvConfig,
    pub num_demos: usize,
    pub noise_std: f64,
    pub collect_seed: u64,
    pub train: TrainConfig,
    pub encoder: EncoderSpec,
    pub query: QueryConfig,
    pub execute_horizon: usize,
    pub policy_window: usize,
    pub exclusion_margin: usize,
    pub dim_scale: Option<Vec<f64>>,
    pub episodes: usize,
    pub eval_seeds: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub fixed: EvalReport,
    pub hetero: EvalReport,
}

/// Trains one pipeline variant on a pre-collected heterogeneous dataset and
/// returns a ready controller. Shared by the ablation sweep and the
/// comparison harness.
pub fn train_pipeline(
    dataset: &Dataset,
    base: &AblationBase,
    cell: &AblationCell,
) -> Result<RetrievalController, ToyError> {
    let obs_dim = dataset.demos[0].obs_dim();
    let action_dim = dataset.demos[0].action_dim();
    let dist_cfg = match &base.dim_scale {
        Some(scale) => SeqDistanceConfig {
            metric: cell.metric,
            dim_scale: scale.clone(),
        },
        None => SeqDistanceConfig::unit(cell.metric, action_dim),
    };
    let mine_windows = enumerate_windows(dataset, cell.window, 1)?;
    let table = mine_pairs(&mine_windows, &dist_cfg, cell.k_quantile, base.exclusion_margin)?;
    let cdf = fit_cdf(&table)?;
    let weights = match cell.weighting {
        Weighting::Soft => build_soft_weights(&table, &cdf),
        Weighting::Hard => build_soft_weights(&table, &cdf).hardened(),
    };

    let mut spec = base.encoder.clone();
    spec.input_dim = obs_dim;
    let outcome = train_class(dataset, &mine_windows, &table, &weights, &spec, &base.train)?;

    let policy_windows = enumerate_windows(dataset, base.policy_window, 1)?;
    let index = build_latent_index(
        dataset,
        &policy_windows,
        &spec,
        &outcome.checkpoint.ema_params,
    )?;
    Ok(RetrievalController {
        index,
        spec,
        params: outcome.checkpoint.ema_params,
        cfg: base.query,
        execute_horizon: base.execute_horizon,
    })
}

/// Full sweep: for each cell, mine, train, and evaluate on both the fixed
/// and the heterogeneous environment.
pub fn ablation_run(base: &AblationBase, grid: &AblationGrid) -> Result<Vec<AblationRow>, ToyError> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(ToyError::InvalidConfig("empty ablation grid".into()));
    }
    let dataset = collect_demos(
        &base.env_hetero,
        base.num_demos,
        base.noise_std,
        base.collect_seed,
    )?;
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut controller = train_pipeline(&dataset, base, &cell)?;
        let fixed = evaluate(
            &base.env_fixed,
            &mut Policy::Controller(&mut controller),
            base.episodes,
            &base.eval_seeds,
        )?;
        let hetero = evaluate(
            &base.env_hetero,
            &mut Policy::Controller(&mut controller),
            base.episodes,
            &base.eval_seeds,
        )?;
        rows.push(AblationRow {
            cell,
            fixed,
            hetero,
        });
    }
    Ok(rows)
}

/// Serializes ablation rows as JSON Lines.
pub fn ablation_jsonl(rows: &[AblationRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serializes"))
        .map(|s| s + "\n")
        .collect()
}

/// Flat CSV export for plotting.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("weighting,window,metric,k_quantile,fixed_mean,hetero_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.cell.weighting.tag(),
            r.cell.window,
            r.cell.metric.tag(),
            r.cell.k_quantile,
            r.fixed.mean,
            r.hetero.mean
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reach_cfg(hetero: Hetero) -> EnvConfig {
        EnvConfig::new(Task::PointReach, hetero)
    }

    fn push_cfg(hetero: Hetero) -> EnvConfig {
        EnvConfig::new(Task::DiscPush, hetero)
    }

    #[test]
    fn fixed_mode_obs_is_unrotated_features() {
        let cfg = reach_cfg(Hetero::Fixed);
        let (state, obs, pro) = reset(&cfg, 5).unwrap();
        assert_eq!(state.theta, 0.0);
        assert_eq!(&obs[0..2], &state.agent_pos);
        assert_eq!(&obs[2..4], &state.goal_pos);
        assert!((obs[4] - (state.goal_pos[0] - state.agent_pos[0])).abs() < 1e-15);
        assert_eq!(&obs[6..8], &LANDMARK);
        assert!(obs[8..].iter().all(|&x| x == 0.0));
        assert_eq!(obs.len(), cfg.obs_dim());
        assert_eq!(pro, state.agent_pos.to_vec());
    }

    #[test]
    fn same_seed_resets_identically() {
        let cfg = push_cfg(Hetero::RandRot);
        let (s1, o1, p1) = reset(&cfg, 99).unwrap();
        let (s2, o2, p2) = reset(&cfg, 99).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(o1, o2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn rotation_preserves_per_group_norms() {
        let fixed = reach_cfg(Hetero::Fixed);
        let rot = reach_cfg(Hetero::RandRot);
        // same seed draws the same geometry before the theta draw
        let (sf, of, _) = reset(&fixed, 7).unwrap();
        let (sr, or, _) = reset(&rot, 7).unwrap();
        assert_eq!(sf.agent_pos, sr.agent_pos);
        assert!(sr.theta != 0.0);
        for g in 0..4 {
            let nf = (of[2 * g].powi(2) + of[2 * g + 1].powi(2)).sqrt();
            let nr = (or[2 * g].powi(2) + or[2 * g + 1].powi(2)).sqrt();
            assert!((nf - nr).abs() < 1e-12, "group {g}: {nf} vs {nr}");
        }
    }

    #[test]
    fn immediate_success_when_at_goal() {
        let cfg = reach_cfg(Hetero::Fixed);
        let (mut state, _, _) = reset(&cfg, 1).unwrap();
        state.agent_pos = state.goal_pos;
        let out = step(&cfg, &mut state, &[0.0, 0.0]).unwrap();
        assert!(out.success && out.done);
        assert!(matches!(
            step(&cfg, &mut state, &[0.0, 0.0]),
            Err(ToyError::StepAfterDone)
        ));
    }

    #[test]
    fn action_clipping_limits_displacement() {
        let cfg = reach_cfg(Hetero::Fixed);
        let (mut state, _, _) = reset(&cfg, 2).unwrap();
        let before = state.agent_pos;
        step(&cfg, &mut state, &[10.0, 0.0]).unwrap();
        let moved = dist(before, state.agent_pos);
        assert!((moved - cfg.action_clip).abs() < 1e-12);
        assert!(matches!(
            step(&cfg, &mut state, &[1.0]),
            Err(ToyError::BadActionDim(1))
        ));
    }

    #[test]
    fn frame_decoupling_identical_actions_different_obs() {
        // same world geometry, different theta: force by hand
        let cfg0 = reach_cfg(Hetero::Fixed);
        let (mut s0, _, _) = reset(&cfg0, 11).unwrap();
        let mut s1 = s0.clone();
        s1.theta = std::f64::consts::FRAC_PI_2;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut actions0 = Vec::new();
        let mut actions1 = Vec::new();
        let mut obs_diff = false;
        for _ in 0..10 {
            if s0.done || s1.done {
                break;
            }
            let a0 = scripted_expert(&cfg0, &s0, 0.0, &mut rng);
            let a1 = scripted_expert(&cfg0, &s1, 0.0, &mut rng);
            actions0.push(a0);
            actions1.push(a1);
            let o0 = step(&cfg0, &mut s0, &a0).unwrap();
            let o1 = step(&cfg0, &mut s1, &a1).unwrap();
            if o0.obs != o1.obs {
                obs_diff = true;
            }
        }
        assert_eq!(actions0, actions1);
        assert!(obs_diff);
    }

    #[test]
    fn expert_points_at_goal_and_idles_at_goal() {
        let cfg = reach_cfg(Hetero::Fixed);
        let (mut state, _, _) = reset(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = scripted_expert(&cfg, &state, 0.0, &mut rng);
        let to_goal = [
            state.goal_pos[0] - state.agent_pos[0],
            state.goal_pos[1] - state.agent_pos[1],
        ];
        let dot = a[0] * to_goal[0] + a[1] * to_goal[1];
        let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
        let ng = (to_goal[0].powi(2) + to_goal[1].powi(2)).sqrt();
        assert!((dot / (na * ng) - 1.0).abs() < 1e-12);
        assert!((na - cfg.action_clip).abs() < 1e-12);

        state.agent_pos = state.goal_pos;
        let a = scripted_expert(&cfg, &state, 0.0, &mut rng);
        assert!((a[0] * a[0] + a[1] * a[1]).sqrt() < 1e-12);
    }

    #[test]
    fn expert_succeeds_on_point_reach_monte_carlo() {
        for hetero in [Hetero::Fixed, Hetero::DynRot] {
            let cfg = reach_cfg(hetero);
            let mut ok = 0;
            for seed in 0..1000u64 {
                if expert_episode(&cfg, mix64(42, seed), 0.01).unwrap().success {
                    ok += 1;
                }
            }
            assert!(ok >= 990, "{}: {ok}/1000", hetero.tag());
        }
    }

    #[test]
    fn expert_succeeds_on_disc_push_monte_carlo() {
        let cfg = push_cfg(Hetero::Fixed);
        let mut ok = 0;
        for seed in 0..1000u64 {
            if expert_episode(&cfg, mix64(7, seed), 0.01).unwrap().success {
                ok += 1;
            }
        }
        assert!(ok >= 990, "{ok}/1000");
    }

    #[test]
    fn collect_demos_deterministic_and_all_successful() {
        let cfg = reach_cfg(Hetero::RandRot);
        let d1 = collect_demos(&cfg, 8, 0.005, 123).unwrap();
        let d2 = collect_demos(&cfg, 8, 0.005, 123).unwrap();
        assert_eq!(d1.demos.len(), 8);
        for demo in &d1.demos {
            assert_eq!(demo.meta.get("success").map(String::as_str), Some("true"));
        }
        let t1 = tempfile::NamedTempFile::new().unwrap();
        let t2 = tempfile::NamedTempFile::new().unwrap();
        crate::demo::save_dataset(&d1, t1.path()).unwrap();
        crate::demo::save_dataset(&d2, t2.path()).unwrap();
        assert_eq!(
            std::fs::read(t1.path()).unwrap(),
            std::fs::read(t2.path()).unwrap()
        );
        // theta varies across demos
        let thetas: Vec<&String> = d1.demos.iter().filter_map(|d| d.meta.get("theta0")).collect();
        assert!(thetas.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn evaluate_expert_high_random_low() {
        let cfg = reach_cfg(Hetero::Fixed);
        let seeds = [1u64, 2];
        let expert = evaluate(&cfg, &mut Policy::Scripted { noise_std: 0.01 }, 25, &seeds).unwrap();
        assert!(expert.mean >= 0.99, "expert mean {}", expert.mean);
        let random = evaluate(&cfg, &mut Policy::Random, 25, &seeds).unwrap();
        assert!(random.mean <= 0.05, "random mean {}", random.mean);
        let again = evaluate(&cfg, &mut Policy::Random, 25, &seeds).unwrap();
        assert_eq!(random.per_seed, again.per_seed);
    }

    #[test]
    fn ablation_grid_row_count_is_axis_product() {
        let grid = AblationGrid {
            weightings: vec![Weighting::Soft, Weighting::Hard],
            windows: vec![1, 4, 8],
            metrics: vec![SeqMetric::Dtw],
            k_quantiles: vec![0.025, 0.05],
        };
        let cells = grid.cells();
        assert_eq!(cells.len(), 2 * 3 * 1 * 2);
        let windows: Vec<usize> = cells.iter().map(|c| c.window).collect();
        assert!(windows.iter().all(|w| [1, 4, 8].contains(w)));
    }

    #[test]
    fn obs_dim_accounting() {
        assert_eq!(reach_cfg(Hetero::Fixed).obs_dim(), 8 + 4);
        assert_eq!(push_cfg(Hetero::Fixed).obs_dim(), 14 + 4);
        let mut cfg = reach_cfg(Hetero::Fixed);
        cfg.appearance_dim = 0;
        assert_eq!(cfg.obs_dim(), 8);
    }

    #[test]
    fn invalid_config_lists_all_problems() {
        let mut cfg = reach_cfg(Hetero::Fixed);
        cfg.success_radius = -1.0;
        cfg.max_steps = 0;
        match cfg.validate() {
            Err(ToyError::InvalidConfig(msg)) => {
                assert!(msg.contains("success_radius"));
                assert!(msg.contains("max_steps"));
            }
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn rand_appearance_sets_nonzero_tail_and_zero_theta() {
        let cfg = reach_cfg(Hetero::RandAppearance);
        let (state, obs, _) = reset(&cfg, 17).unwrap();
        assert_eq!(state.theta, 0.0);
        assert!(obs[8..].iter().any(|&x| x != 0.0));
        assert_eq!(state.appearance.len(), cfg.appearance_dim);
    }

    #[test]
    fn dyn_rot_increments_theta_per_step() {
        let cfg = reach_cfg(Hetero::DynRot);
        let (mut state, _, _) = reset(&cfg, 21).unwrap();
        let t0 = state.theta;
        step(&cfg, &mut state, &[0.01, 0.0]).unwrap();
        let expect = (t0 + cfg.dyn_rot_rate).rem_euclid(std::f64::consts::TAU);
        assert!((state.theta - expect).abs() < 1e-12);
    }
}
