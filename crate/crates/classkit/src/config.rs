//! Unified run configuration: one TOML document drives every pipeline stage,
//! with per-stage CLI overrides applied on top. Validation reports every
//! violation at once rather than stopping at the first.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dtw::SeqMetric;
use crate::encoder::{Activation, AugmentConfig, EncoderSpec};
use crate::retrieval::QueryConfig;
use crate::toybench::{EnvConfig, Hetero, Task, Weighting};
use crate::trainer::{OptimizerKind, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("could not parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("missing upstream artifact: expected {0}")]
    MissingArtifact(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    pub task: Task,
    pub hetero: Hetero,
    pub dyn_rot_rate_deg: f64,
    pub appearance_dim: usize,
    pub success_radius: f64,
    pub max_steps: usize,
    pub action_clip: f64,
    pub num_demos: usize,
    pub noise_std: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        EnvSection {
            task: Task::PointReach,
            hetero: Hetero::Fixed,
            dyn_rot_rate_deg: 0.5,
            appearance_dim: 4,
            success_radius: 0.05,
            max_steps: 200,
            action_clip: 0.05,
            num_demos: 200,
            noise_std: 0.005,
        }
    }
}

impl EnvSection {
    pub fn to_env_config(&self) -> EnvConfig {
        EnvConfig {
            task: self.task,
            hetero: self.hetero,
            dyn_rot_rate: self.dyn_rot_rate_deg.to_radians(),
            appearance_dim: self.appearance_dim,
            success_radius: self.success_radius,
            max_steps: self.max_steps,
            action_clip: self.action_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningSection {
    pub window: usize,
    pub k_quantile: f64,
    pub metric: SeqMetric,
    pub weighting: Weighting,
    pub exclusion_margin: usize,
    /// Optional per-dimension action scaling before the local cost.
    pub dim_scale: Option<Vec<f64>>,
}

impl Default for MiningSection {
    fn default() -> Self {
        MiningSection {
            window: 16,
            k_quantile: 0.025,
            metric: SeqMetric::Dtw,
            weighting: Weighting::Soft,
            exclusion_margin: 0,
            dim_scale: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub ema_power: f64,
    pub optimizer: OptimizerKind,
    pub trust_coeff: f64,
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub activation: Activation,
    /// Extra hidden widths for the behavior-cloning head.
    pub bc_head_dims: Vec<usize>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingSection {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            tau: t.tau,
            epochs: t.epochs,
            warmup_steps: t.warmup_steps,
            grad_clip_norm: t.grad_clip_norm,
            ema_power: t.ema_power,
            optimizer: t.optimizer,
            trust_coeff: t.trust_coeff,
            noise_sigma: t.augment.noise_sigma,
            mask_prob: t.augment.mask_prob,
            hidden_dims: vec![64, 64],
            latent_dim: 16,
            activation: Activation::Tanh,
            bc_head_dims: vec![64],
        }
    }
}

impl TrainingSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            tau: self.tau,
            epochs: self.epochs,
            warmup_steps: self.warmup_steps,
            grad_clip_norm: self.grad_clip_norm,
            ema_power: self.ema_power,
            seed,
            optimizer: self.optimizer,
            trust_coeff: self.trust_coeff,
            augment: AugmentConfig {
                noise_sigma: self.noise_sigma,
                mask_prob: self.mask_prob,
            },
        }
    }

    pub fn to_encoder_spec(&self, input_dim: usize) -> EncoderSpec {
        EncoderSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.latent_dim,
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSection {
    pub episodes: usize,
    pub eval_seeds: Vec<u64>,
    pub k_nn: usize,
    pub tau_nn: f64,
    /// T_a: actions executed per retrieval query.
    pub execute_horizon: usize,
    /// T_p: stored action-window length.
    pub policy_window: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            episodes: 50,
            eval_seeds: vec![0, 1, 2],
            k_nn: 64,
            tau_nn: 0.001,
            execute_horizon: 16,
            policy_window: 16,
        }
    }
}

impl EvaluationSection {
    pub fn to_query_config(&self) -> QueryConfig {
        QueryConfig {
            k_nn: self.k_nn,
            tau_nn: self.tau_nn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<String>,
    pub env: EnvSection,
    pub mining: MiningSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(toml::from_str(&text)?)
    }

    /// Collects every violation instead of failing fast.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let e = &self.env;
        if e.dyn_rot_rate_deg <= 0.0 || !e.dyn_rot_rate_deg.is_finite() {
            problems.push("env.dyn_rot_rate_deg must be positive".into());
        }
        if e.success_radius <= 0.0 || !e.success_radius.is_finite() {
            problems.push("env.success_radius must be positive".into());
        }
        if e.action_clip <= 0.0 || !e.action_clip.is_finite() {
            problems.push("env.action_clip must be positive".into());
        }
        if e.max_steps == 0 {
            problems.push("env.max_steps must be positive".into());
        }
        if e.num_demos == 0 {
            problems.push("env.num_demos must be at least 1".into());
        }
        if e.noise_std < 0.0 || !e.noise_std.is_finite() {
            problems.push("env.noise_std must be nonnegative".into());
        }
        let m = &self.mining;
        if m.window == 0 {
            problems.push("mining.window must be at least 1".into());
        }
        if !(m.k_quantile > 0.0 && m.k_quantile <= 1.0) {
            problems.push("mining.k_quantile must be in (0, 1]".into());
        }
        if let Some(scale) = &m.dim_scale {
            if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
                problems.push("mining.dim_scale entries must be positive".into());
            }
        }
        let t = &self.training;
        if t.batch_size < 2 {
            problems.push("training.batch_size must be at least 2".into());
        }
        if t.learning_rate <= 0.0 || !t.learning_rate.is_finite() {
            problems.push("training.learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&t.momentum) {
            problems.push("training.momentum must be in [0, 1)".into());
        }
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            problems.push("training.tau must be positive".into());
        }
        if t.grad_clip_norm <= 0.0 {
            problems.push("training.grad_clip_norm must be positive".into());
        }
        if !(t.ema_power > 0.0 && t.ema_power <= 1.0) {
            problems.push("training.ema_power must be in (0, 1]".into());
        }
        if t.latent_dim == 0 {
            problems.push("training.latent_dim must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&t.mask_prob) {
            problems.push("training.mask_prob must be in [0, 1]".into());
        }
        if t.noise_sigma < 0.0 {
            problems.push("training.noise_sigma must be nonnegative".into());
        }
        let v = &self.evaluation;
        if v.episodes == 0 {
            problems.push("evaluation.episodes must be at least 1".into());
        }
        if v.eval_seeds.is_empty() {
            problems.push("evaluation.eval_seeds must be nonempty".into());
        }
        if v.k_nn == 0 {
            problems.push("evaluation.k_nn must be at least 1".into());
        }
        if !(v.tau_nn > 0.0 && v.tau_nn.is_finite()) {
            problems.push("evaluation.tau_nn must be positive".into());
        }
        if v.execute_horizon == 0 || v.execute_horizon > v.policy_window {
            problems.push(
                "evaluation.execute_horizon must be in [1, evaluation.policy_window]".into(),
            );
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }
}

/// Well-known artifact locations inside the run output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub out_dir: PathBuf,
}

impl Artifacts {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Artifacts {
            out_dir: out_dir.into(),
        }
    }

    pub fn dataset(&self) -> PathBuf {
        self.out_dir.join("dataset.jsonl")
    }

    pub fn pair_table(&self) -> PathBuf {
        self.out_dir.join("pairs.bin")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.out_dir.join("checkpoint.bin")
    }

    pub fn bc_checkpoint(&self) -> PathBuf {
        self.out_dir.join("bc_checkpoint.bin")
    }

    pub fn report_jsonl(&self) -> PathBuf {
        self.out_dir.join("report.jsonl")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.out_dir.join("report.csv")
    }

    pub fn timings(&self) -> PathBuf {
        self.out_dir.join("timings.json")
    }

    pub fn ablation_jsonl(&self) -> PathBuf {
        self.out_dir.join("ablation.jsonl")
    }

    pub fn ablation_csv(&self) -> PathBuf {
        self.out_dir.join("ablation.csv")
    }

    pub fn kl_dump(&self) -> PathBuf {
        self.out_dir.join("kl_diagnostics.jsonl")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.out_dir.join("embeddings.csv")
    }

    /// Fails with the expected path if an upstream artifact is absent.
    pub fn require(&self, path: &Path) -> Result<PathBuf, ConfigError> {
        if path.is_file() {
            Ok(path.to_path_buf())
        } else {
            Err(ConfigError::MissingArtifact(path.display().to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn default_hyperparameters_match_contract() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.training.tau, 0.05);
        assert_eq!(cfg.training.warmup_steps, 500);
        assert_eq!(cfg.training.grad_clip_norm, 0.5);
        assert_eq!(cfg.training.ema_power, 0.75);
        assert_eq!(cfg.evaluation.k_nn, 64);
        assert_eq!(cfg.evaluation.execute_horizon, 16);
        assert_eq!(cfg.evaluation.policy_window, 16);
        assert_eq!(cfg.mining.window, 16);
        assert_eq!(cfg.mining.k_quantile, 0.025);
        assert_eq!(cfg.training.batch_size, 64);
    }

    #[test]
    fn partial_toml_uses_section_defaults() {
        let cfg: RunConfig = toml::from_str(
            "seed = 9\n[env]\ntask = \"disc_push\"\nhetero = \"rand_rot\"\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.env.task, Task::DiscPush);
        assert_eq!(cfg.env.hetero, Hetero::RandRot);
        assert_eq!(cfg.env.max_steps, 200);
        assert_eq!(cfg.mining.window, 16);
    }

    #[test]
    fn validation_lists_every_violation() {
        let mut cfg = RunConfig::default();
        cfg.env.max_steps = 0;
        cfg.mining.k_quantile = 2.0;
        cfg.evaluation.episodes = 0;
        match cfg.validate() {
            Err(ConfigError::Invalid(problems)) => {
                assert_eq!(problems.len(), 3);
                let text = problems.join("\n");
                assert!(text.contains("env.max_steps"));
                assert!(text.contains("mining.k_quantile"));
                assert!(text.contains("evaluation.episodes"));
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn missing_artifact_names_expected_path() {
        let tmp = tempfile::tempdir().unwrap();
        let art = Artifacts::new(tmp.path());
        let err = art.require(&art.checkpoint()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("checkpoint.bin"), "{msg}");
        std::fs::write(art.checkpoint(), b"x").unwrap();
        art.require(&art.checkpoint()).unwrap();
    }

    #[test]
    fn env_section_converts_degrees() {
        let section = EnvSection::default();
        let env = section.to_env_config();
        assert!((env.dyn_rot_rate - 0.5_f64.to_radians()).abs() < 1e-15);
    }
}
