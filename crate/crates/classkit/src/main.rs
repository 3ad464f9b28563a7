//! Pipeline front-end: collect demonstrations, mine positive pairs, train
//! the contrastive encoder or the behavior-cloning baseline, evaluate
//! controllers, run ablation sweeps, and export diagnostics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use classkit::config::{Artifacts, ConfigError, RunConfig};
use classkit::contrastive;
use classkit::demo::{enumerate_windows, load_dataset, save_dataset, Dataset};
use classkit::dtw::{SeqDistanceConfig, SeqMetric};
use classkit::encoder::{encode, normalize};
use classkit::mining::{
    build_soft_weights, fit_cdf, load_pair_table, mine_pairs, save_pair_table, SoftWeights,
};
use classkit::report::{compare, raw_knn_controller, report_csv, report_jsonl, NamedMethod};
use classkit::retrieval::{build_latent_index, BcController, RetrievalController};
use classkit::toybench::{
    ablation_csv, ablation_jsonl, ablation_run, collect_demos, AblationBase, AblationGrid,
    Hetero, Policy, Weighting,
};
use classkit::trainer::{
    config_hash, load_checkpoint, save_checkpoint, train_bc, train_class, BatchSampler,
    Checkpoint,
};

#[derive(Parser)]
#[command(name = "classkit", about = "Similarity-mined contrastive retrieval pipeline")]
struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override (also overridable via CLASSKIT_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cap on worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Override mining.k_quantile.
    #[arg(long, global = true)]
    k_quantile: Option<f64>,
    /// Override mining.window.
    #[arg(long, global = true)]
    window: Option<usize>,
    /// Override mining.metric.
    #[arg(long, global = true, value_parser = parse_metric)]
    metric: Option<SeqMetric>,
    /// Override mining.weighting.
    #[arg(long, global = true, value_parser = parse_weighting)]
    weighting: Option<Weighting>,
    /// Override env.hetero.
    #[arg(long, global = true, value_parser = parse_hetero)]
    hetero: Option<Hetero>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect expert demonstrations into dataset.jsonl.
    Collect,
    /// Mine the positive-pair table from the dataset.
    Mine,
    /// Train the contrastive encoder from dataset + pair table.
    Train,
    /// Train the behavior-cloning baseline.
    TrainBc,
    /// Evaluate available controllers and write the comparison report.
    Eval,
    /// Run the ablation sweep over the requested axes.
    Ablate {
        /// Comma-separated weighting axis, e.g. "soft,hard".
        #[arg(long)]
        weightings: Option<String>,
        /// Comma-separated window axis, e.g. "1,4,8,16".
        #[arg(long)]
        windows: Option<String>,
        /// Comma-separated metric axis, e.g. "dtw,l2".
        #[arg(long)]
        metrics: Option<String>,
        /// Comma-separated quantile axis, e.g. "0.01,0.025".
        #[arg(long)]
        k_quantiles: Option<String>,
    },
    /// Dump per-anchor loss, KL, and entropy for one deterministic batch.
    DiagKl,
    /// Export normalized window embeddings as CSV.
    ExportEmbeddings,
}

fn parse_metric(s: &str) -> Result<SeqMetric, String> {
    match s {
        "dtw" => Ok(SeqMetric::Dtw),
        "l2" => Ok(SeqMetric::L2),
        other => Err(format!("unknown metric {other:?} (expected dtw|l2)")),
    }
}

fn parse_weighting(s: &str) -> Result<Weighting, String> {
    match s {
        "soft" => Ok(Weighting::Soft),
        "hard" => Ok(Weighting::Hard),
        other => Err(format!("unknown weighting {other:?} (expected soft|hard)")),
    }
}

fn parse_hetero(s: &str) -> Result<Hetero, String> {
    match s {
        "fixed" => Ok(Hetero::Fixed),
        "rand_rot" => Ok(Hetero::RandRot),
        "dyn_rot" => Ok(Hetero::DynRot),
        "rand_appearance" => Ok(Hetero::RandAppearance),
        other => Err(format!(
            "unknown hetero mode {other:?} (expected fixed|rand_rot|dyn_rot|rand_appearance)"
        )),
    }
}

/// Exit code 1: configuration/validation problems. Exit code 2: runtime
/// failures in an otherwise valid run.
enum AppError {
    Validation(String),
    Runtime(String),
}

impl AppError {
    fn exit_code(&self) -> ExitCode {
        match self {
            AppError::Validation(_) => ExitCode::from(1),
            AppError::Runtime(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            AppError::Validation(m) | AppError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for AppError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => AppError::Runtime(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> AppError {
    AppError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn effective_config(cli: &Cli) -> Result<(RunConfig, Artifacts), AppError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(k) = cli.k_quantile {
        cfg.mining.k_quantile = k;
    }
    if let Some(w) = cli.window {
        cfg.mining.window = w;
    }
    if let Some(m) = cli.metric {
        cfg.mining.metric = m;
    }
    if let Some(w) = cli.weighting {
        cfg.mining.weighting = w;
    }
    if let Some(h) = cli.hetero {
        cfg.env.hetero = h;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Ok(var) = std::env::var("CLASSKIT_SEED") {
        cfg.seed = var
            .parse()
            .map_err(|_| AppError::Validation(format!("CLASSKIT_SEED is not a u64: {var:?}")))?;
    }
    cfg.validate()?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| {
            AppError::Validation("no output directory: pass --out or set out_dir".into())
        })?;
    std::fs::create_dir_all(&out_dir).map_err(runtime)?;
    Ok((cfg, Artifacts::new(out_dir)))
}

/// Stamps an artifact with the config hash and seed that produced it.
fn write_stamp(artifact: &std::path::Path, cfg: &RunConfig) -> Result<(), AppError> {
    let hash = config_hash(cfg);
    let hex: String = hash.iter().map(|b| format!("{b:02x}")).collect();
    let stamp = serde_json::json!({ "config_hash": hex, "seed": cfg.seed });
    let path = artifact.with_extension(format!(
        "{}.meta.json",
        artifact
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_default()
    ));
    std::fs::write(path, serde_json::to_string_pretty(&stamp).unwrap()).map_err(runtime)
}

fn run(cli: Cli) -> Result<(), AppError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(runtime)?;
    }
    let (cfg, art) = effective_config(&cli)?;
    match &cli.command {
        Command::Collect => cmd_collect(&cfg, &art),
        Command::Mine => cmd_mine(&cfg, &art),
        Command::Train => cmd_train(&cfg, &art),
        Command::TrainBc => cmd_train_bc(&cfg, &art),
        Command::Eval => cmd_eval(&cfg, &art),
        Command::Ablate {
            weightings,
            windows,
            metrics,
            k_quantiles,
        } => cmd_ablate(
            &cfg,
            &art,
            weightings.as_deref(),
            windows.as_deref(),
            metrics.as_deref(),
            k_quantiles.as_deref(),
        ),
        Command::DiagKl => cmd_diag_kl(&cfg, &art),
        Command::ExportEmbeddings => cmd_export_embeddings(&cfg, &art),
    }
}

fn load_required_dataset(art: &Artifacts) -> Result<Dataset, AppError> {
    art.require(&art.dataset())?;
    load_dataset(art.dataset()).map_err(runtime)
}

fn apply_weighting(cfg: &RunConfig, weights: SoftWeights) -> SoftWeights {
    match cfg.mining.weighting {
        Weighting::Soft => weights,
        Weighting::Hard => weights.hardened(),
    }
}

fn dist_config(cfg: &RunConfig, action_dim: usize) -> SeqDistanceConfig {
    match &cfg.mining.dim_scale {
        Some(scale) => SeqDistanceConfig {
            metric: cfg.mining.metric,
            dim_scale: scale.clone(),
        },
        None => SeqDistanceConfig::unit(cfg.mining.metric, action_dim),
    }
}

fn cmd_collect(cfg: &RunConfig, art: &Artifacts) -> Result<(), AppError> {
    let env = cfg.env.to_env_config();
    let dataset =
        collect_demos(&env, cfg.env.num_demos, cfg.env.noise_std, cfg.seed).map_err(runtime)?;
    save_dataset(&dataset, art.dataset()).map_err(runtime)?;
    write_stamp(&art.dataset(), cfg)?;
    println!(
        "collected {} demos ({} timesteps) -> {}",
        dataset.demos.len(),
        dataset.total_timesteps(),
        art.dataset().display()
    );
    Ok(())
}

fn cmd_mine(cfg: &RunConfig, art: &Artifacts) -> Result<(), AppError> {
    let dataset = load_required_dataset(art)?;
    let action_dim = dataset.demos[0].action_dim();
    let windows = enumerate_windows(&dataset, cfg.mining.window, 1).map_err(runtime)?;
    let table = mine_pairs(
        &windows,
        &dist_config(cfg, action_dim),
        cfg.mining.k_quantile,
        cfg.mining.exclusion_margin,
    )
    .map_err(runtime)?;
    let cdf = fit_cdf(&table).map_err(runtime)?;
    let weights = build_soft_weights(&table, &cdf);
    save_pair_table(&table, &weights, art.pair_table()).map_err(runtime)?;
    write_stamp(&art.pair_table(), cfg)?;
    println!(
        "mined {} pairs over {} windows (threshold {:.6}) -> {}",
        table.pairs.len(),
        table.window_count,
        table.threshold,
        art.pair_table().display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, art: &Artifacts) -> Result<(), AppError> {
    let dataset = load_required_dataset(art)?;
    art.require(&art.pair_table())?;
    let (table, stored_weights) = load_pair_table(art.pair_table()).map_err(runtime)?;
    let windows = enumerate_windows(&dataset, cfg.mining.window, 1).map_err(runtime)?;
    if windows.len() != table.window_count {
        return Err(AppError::Validation(format!(
            "pair table was mined over {} windows but the dataset yields {}; \
             re-run mine with the current window size",
            table.window_count,
            windows.len()
        )));
    }
    let weights = apply_weighting(cfg, stored_weights);
    let spec = cfg.training.to_encoder_spec(dataset.demos[0].obs_dim());
    let train_cfg = cfg.training.to_train_config(cfg.seed);
    let outcome =
        train_class(&dataset, &windows, &table, &weights, &spec, &train_cfg).map_err(runtime)?;
    save_checkpoint(&outcome.checkpoint, art.checkpoint()).map_err(runtime)?;
    write_stamp(&art.checkpoint(), cfg)?;
    let final_loss = outcome
        .loss_trace
        .iter()
        .rev()
        .find(|l| l.is_finite())
        .copied()
        .unwrap_or(f64::NAN);
    println!(
        "trained {} steps (final loss {:.4}) -> {}",
        outcome.checkpoint.step,
        final_loss,
        art.checkpoint().display()
    );
    Ok(())
}

fn cmd_train_bc(cfg: &RunConfig, art: &Artifacts) -> Result<(), AppError> {
    let dataset = load_required_dataset(art)?;
    let windows = enumerate_windows(&dataset, cfg.evaluation.policy_window, 1).map_err(runtime)?;
    let spec = cfg.training.to_encoder_spec(dataset.demos[0].obs_dim());
    let train_cfg = cfg.training.to_train_config(cfg.seed);
    let outcome = train_bc(
        &dataset,
        &windows,
        &spec,
        &cfg.training.bc_head_dims,
        &train_cfg,
    )
    .map_err(runtime)?;
    save_checkpoint(&outcome.checkpoint, art.bc_checkpoint()).map_err(runtime)?;
    write_stamp(&art.bc_checkpoint(), cfg)?;
    println!(
        "trained BC baseline {} steps (final loss {:.6}) -> {}",
        outcome.checkpoint.step,
        outcome.loss_trace.last().copied().unwrap_or(f64::NAN),
        art.bc_checkpoint().display()
    );
    Ok(())
}

fn class_controller(
    cfg: &RunConfig,
    dataset: &Dataset,
    ckpt: &Checkpoint,
) -> Result<RetrievalController, AppError> {
    let windows = enumerate_windows(dataset, cfg.evaluation.policy_window, 1).map_err(runtime)?;
    let index =
        build_latent_index(dataset, &windows, &ckpt.spec, &ckpt.ema_params).map_err(runtime)?;
    Ok(RetrievalController {
        index,
        spec: ckpt.spec.clone(),
        params: ckpt.ema_params.clone(),
        cfg: cfg.evaluation.to_query_config(),
        execute_horizon: cfg.evaluation.execute_horizon,
    })
}

fn cmd_eval(cfg: &RunConfig, art: &Artifacts) -> Result<(), AppError> {
    let dataset = load_required_dataset(art)?;
    art.require(&art.checkpoint())?;
    let ckpt = load_checkpoint(art.checkpoint()).map_err(runtime)?;
    let mut class_ctrl = class_controller(cfg, &dataset, &ckpt)?;
    let mut raw_ctrl = raw_knn_controller(
        &dataset,
        cfg.evaluation.policy_window,
        cfg.evaluation.to_query_config(),
        cfg.evaluation.execute_horizon,
    )
    .map_err(runtime)?;
    let mut methods = vec![
        NamedMethod {
            name: "class_retrieval".to_string(),
            policy: Policy::Controller(&mut class_ctrl),
        },
        NamedMethod {
            name: "raw_knn".to_string(),
            policy: Policy::Controller(&mut raw_ctrl),
        },
    ];
    let mut bc_ctrl;
    if art.bc_checkpoint().is_file() {
        let bc = load_checkpoint(art.bc_checkpoint()).map_err(runtime)?;
        bc_ctrl = BcController {
            spec: bc.spec.clone(),
            params: bc.params.clone(),
            action_dim: dataset.demos[0].action_dim(),
            execute_horizon: cfg.evaluation.execute_horizon,
        };
        methods.push(NamedMethod {
            name: "bc_mlp".to_string(),
            policy: Policy::Controller(&mut bc_ctrl),
        });
    }
    let env = cfg.env.to_env_config();
    let (report, timings) = compare(
        &mut methods,
        &[env],
        cfg.evaluation.episodes,
        &cfg.evaluation.eval_seeds,
    )
    .map_err(runtime)?;
    std::fs::write(art.report_jsonl(), report_jsonl(&report)).map_err(runtime)?;
    std::fs::write(art.report_csv(), report_csv(&report)).map_err(runtime)?;
    std::fs::write(
        art.timings(),
        serde_json::to_string_pretty(&timings).unwrap(),
    )
    .map_err(runtime)?;
    write_stamp(&art.report_jsonl(), cfg)?;
    for row in &report.rows {
        println!(
            "{} [{}]: mean {:.3} (95% CI {:.3}-{:.3})",
            row.method, row.hetero, row.mean, row.wilson_low, row.wilson_high
        );
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(
    text: Option<&str>,
    axis: &str,
) -> Result<Option<Vec<T>>, AppError> {
    let Some(text) = text else { return Ok(None) };
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| AppError::Validation(format!("bad {axis} value {t:?}")))
        })
        .collect::<Result<Vec<T>, _>>()
        .map(Some)
}

fn cmd_ablate(
    cfg: &RunConfig,
    art: &Artifacts,
    weightings: Option<&str>,
    windows: Option<&str>,
    metrics: Option<&str>,
    k_quantiles: Option<&str>,
) -> Result<(), AppError> {
    let weightings = match weightings {
        Some(text) => text
            .split(',')
            .map(|t| parse_weighting(t.trim()).map_err(AppError::Validation))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![cfg.mining.weighting],
    };
    let metrics = match metrics {
        Some(text) => text
            .split(',')
            .map(|t| parse_metric(t.trim()).map_err(AppError::Validation))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![cfg.mining.metric],
    };
    let windows = parse_list::<usize>(windows, "window")?.unwrap_or(vec![cfg.mining.window]);
    let k_quantiles =
        parse_list::<f64>(k_quantiles, "k_quantile")?.unwrap_or(vec![cfg.mining.k_quantile]);
    let grid = AblationGrid {
        weightings,
        windows,
        metrics,
        k_quantiles,
    };

    let mut env_fixed = cfg.env.to_env_config();
    env_fixed.hetero = Hetero::Fixed;
    let env_hetero = cfg.env.to_env_config();
    let base = AblationBase {
        env_fixed,
        env_hetero,
        num_demos: cfg.env.num_demos,
        noise_std: cfg.env.noise_std,
        collect_seed: cfg.seed,
        train: cfg.training.to_train_config(cfg.seed),
        encoder: cfg.training.to_encoder_spec(0),
        query: cfg.evaluation.to_query_config(),
        execute_horizon: cfg.evaluation.execute_horizon,
        policy_window: cfg.evaluation.policy_window,
        exclusion_margin: cfg.mining.exclusion_margin,
        dim_scale: cfg.mining.dim_scale.clone(),
        episodes: cfg.evaluation.episodes,
        eval_seeds: cfg.evaluation.eval_seeds.clone(),
    };
    let rows = ablation_run(&base, &grid).map_err(runtime)?;
    std::fs::write(art.ablation_jsonl(), ablation_jsonl(&rows)).map_err(runtime)?;
    std::fs::write(art.ablation_csv(), ablation_csv(&rows)).map_err(runtime)?;
    write_stamp(&art.ablation_jsonl(), cfg)?;
    for row in &rows {
        println!(
            "{}/w{}/{}/K{}: fixed {:.3}, hetero {:.3}",
            row.cell.weighting.tag(),
            row.cell.window,
            row.cell.metric.tag(),
            row.cell.k_quantile,
            row.fixed.mean,
            row.hetero.mean
        );
    }
    Ok(())
}

fn cmd_diag_kl(cfg: &RunConfig, art: &Artifacts) -> Result<(), AppError> {
    let dataset = load_required_dataset(art)?;
    art.require(&art.pair_table())?;
    art.require(&art.checkpoint())?;
    let (table, stored_weights) = load_pair_table(art.pair_table()).map_err(runtime)?;
    let ckpt = load_checkpoint(art.checkpoint()).map_err(runtime)?;
    let windows = enumerate_windows(&dataset, cfg.mining.window, 1).map_err(runtime)?;
    let weights = apply_weighting(cfg, stored_weights);
    let sampler = BatchSampler::new(&table);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = classkit::trainer::build_batch(
        &dataset,
        &windows,
        &sampler,
        &weights,
        cfg.training.batch_size.min(windows.len()),
        &mut rng,
    )
    .map_err(runtime)?;
    let z = encode(&ckpt.spec, &ckpt.ema_params, &batch.obs).map_err(runtime)?;
    let z_hat: Vec<Vec<f64>> = z
        .iter()
        .map(|row| normalize(row))
        .collect::<Result<_, _>>()
        .map_err(runtime)?;
    let sim = contrastive::similarity_matrix(&z_hat, cfg.training.tau).map_err(runtime)?;
    let report = contrastive::soft_infonce(&sim, &batch.weights).map_err(runtime)?;
    let decomp = contrastive::kl_decomposition(&sim, &batch.weights).map_err(runtime)?;
    let mut out = String::new();
    for (anchor, (loss, parts)) in report.per_anchor.iter().zip(&decomp).enumerate() {
        let record = match (loss, parts) {
            (Some(loss), Some((kl, entropy))) => serde_json::json!({
                "anchor": anchor,
                "window_ordinal": batch.ordinals[anchor],
                "loss": loss,
                "kl": kl,
                "entropy": entropy,
                "kl_plus_entropy": kl + entropy,
            }),
            _ => serde_json::json!({
                "anchor": anchor,
                "window_ordinal": batch.ordinals[anchor],
                "active": false,
            }),
        };
        out.push_str(&record.to_string());
        out.push('\n');
    }
    std::fs::write(art.kl_dump(), out).map_err(runtime)?;
    write_stamp(&art.kl_dump(), cfg)?;
    println!(
        "mean loss {:.6} over {} active anchors -> {}",
        report.mean_loss,
        report.active_anchor_count,
        art.kl_dump().display()
    );
    Ok(())
}

fn cmd_export_embeddings(cfg: &RunConfig, art: &Artifacts) -> Result<(), AppError> {
    let dataset = load_required_dataset(art)?;
    art.require(&art.checkpoint())?;
    let ckpt = load_checkpoint(art.checkpoint()).map_err(runtime)?;
    let windows = enumerate_windows(&dataset, cfg.evaluation.policy_window, 1).map_err(runtime)?;
    let mut out = String::from("demo_ord,t");
    for d in 0..ckpt.spec.output_dim {
        out.push_str(&format!(",z{d}"));
    }
    out.push('\n');
    for w in &windows {
        let (obs, _) = classkit::demo::observation_at(&dataset, w.index).map_err(runtime)?;
        let z = encode(
            &ckpt.spec,
            &ckpt.ema_params,
            std::slice::from_ref(&obs.to_vec()),
        )
        .map_err(runtime)?;
        let z_hat = normalize(&z[0]).map_err(runtime)?;
        out.push_str(&format!("{},{}", w.index.demo_ord, w.index.t));
        for v in z_hat {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(art.embeddings(), out).map_err(runtime)?;
    write_stamp(&art.embeddings(), cfg)?;
    println!("exported {} embeddings -> {}", windows.len(), art.embeddings().display());
    Ok(())
}
