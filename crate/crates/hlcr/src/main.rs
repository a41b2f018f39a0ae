//! Command-line interface: generate synthetic data, train centrally or
//! federated, predict, and evaluate.
//!
//! Exit codes: 0 on success, 2 on validation errors (bad arguments,
//! malformed input files, mismatched checkpoints), 1 on unexpected I/O
//! failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use hlcr::federated::{derive_seed, RoundConfig};
use hlcr::inference::{self, PredictMode};
use hlcr::io::{
    self, DatasetManifest, GroundTruthFile, IoError, ModelCheckpoint, PredictionRow,
};
use hlcr::metrics;
use hlcr::model::{
    generate_synthetic, GeneratorConfig, HierDataset, Hyperparams, ModelError,
};

#[derive(Parser)]
#[command(
    name = "hlcr",
    about = "Hierarchical latent class regression: mixtures of linear \
             regressions over agent/entity/event data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known latent structure.
    Generate(GenerateArgs),
    /// Train by collapsed Gibbs sampling on the full dataset.
    Train(TrainArgs),
    /// Train by simulated federated rounds with partial participation.
    FedTrain(FedTrainArgs),
    /// Predict targets for a dataset using a trained model.
    Predict(PredictArgs),
    /// Report MSE and, with ground truth, clustering quality.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct HyperArgs {
    /// Number of clusters.
    #[arg(short, long, default_value_t = 4)]
    k: usize,
    /// Global Dirichlet concentration.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// Per-agent Dirichlet concentration.
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Prior standard deviation of regression coefficients.
    #[arg(long, default_value_t = 1.0)]
    delta: f64,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Base seed; every stochastic stage derives its own stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl HyperArgs {
    fn to_hyperparams(&self, gamma: f64, t: usize) -> Hyperparams {
        Hyperparams {
            alpha: self.alpha,
            beta: self.beta,
            delta: self.delta,
            sigma: self.sigma,
            k: self.k,
            gamma,
            t,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Number of agents.
    #[arg(long, default_value_t = 128)]
    agents: usize,
    /// Feature dimension (before the optional bias column).
    #[arg(long, default_value_t = 5)]
    features: usize,
    /// Mean entities per agent.
    #[arg(long, default_value_t = 4.0)]
    mean_entities: f64,
    /// Mean events per entity.
    #[arg(long, default_value_t = 8.0)]
    mean_events: f64,
    /// Append a constant-1 bias column to every feature vector.
    #[arg(long, default_value_t = false)]
    bias: bool,
    /// Output directory for data.csv, manifest.json, ground_truth.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Number of Gibbs sweeps.
    #[arg(short = 't', long, default_value_t = 30)]
    sweeps: usize,
    /// Hold out this trailing fraction of each entity's events for
    /// monitoring (0 disables).
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Checkpoint output path.
    #[arg(long)]
    model_out: PathBuf,
    /// Optional per-sweep trace CSV.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct FedTrainArgs {
    #[command(flatten)]
    hyper: HyperArgs,
    /// Dataset CSV.
    #[arg(long)]
    data: PathBuf,
    /// Number of federated rounds.
    #[arg(long, default_value_t = 30)]
    rounds: usize,
    /// Fraction of agents sampled per round, in (0, 1].
    #[arg(long, default_value_t = 0.15)]
    fraction: f64,
    /// Server smoothing: new = (1-gamma)*old + gamma*fresh after round 1.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Hold out this trailing fraction of each entity's events for
    /// monitoring (0 disables).
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Checkpoint output path.
    #[arg(long)]
    model_out: PathBuf,
    /// Optional per-round trace CSV.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum LabelChoice {
    /// Posterior mode, ties toward the lowest cluster index.
    Argmax,
    /// Draw from the label posterior.
    Sample,
}

#[derive(Args)]
struct PredictArgs {
    /// Dataset CSV to predict on.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Predictions CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// How to choose a cluster when the checkpoint has no stored label
    /// for an entity.
    #[arg(long, value_enum, default_value_t = LabelChoice::Argmax)]
    mode: LabelChoice,
    /// Seed for --mode sample; defaults to the checkpoint's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Dataset CSV to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Ground-truth JSON; enables clustering metrics.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Evaluate only this trailing fraction of each entity's events
    /// (0 evaluates everything).
    #[arg(long, default_value_t = 0.0)]
    holdout: f64,
    /// Write the metrics JSON here as well as to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    /// Bad input: arguments, file contents, or model/data mismatch.
    Validation(String),
    /// Environment failure (filesystem and the like).
    Other(String),
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Format { .. } | IoError::Invalid(_) | IoError::Model(_) => {
                CliError::Validation(e.to_string())
            }
            IoError::Csv(ref inner) if inner.kind().position().is_some() => {
                CliError::Validation(e.to_string())
            }
            IoError::Json(_) => CliError::Validation(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::FedTrain(args) => cmd_fed_train(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn check_fraction(name: &str, v: f64, open_zero: bool) -> Result<(), CliError> {
    let ok = if open_zero {
        v > 0.0 && v <= 1.0
    } else {
        (0.0..1.0).contains(&v)
    };
    if !ok {
        return Err(CliError::Validation(format!(
            "{name} must be in {}, got {v}",
            if open_zero { "(0, 1]" } else { "[0, 1)" }
        )));
    }
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<(), CliError> {
    let hp = args.hyper.to_hyperparams(0.1, 1);
    hp.validate()?;
    let cfg = GeneratorConfig {
        num_agents: args.agents,
        feature_dim: args.features,
        mean_entities: args.mean_entities,
        mean_events: args.mean_events,
        bias_column: args.bias,
    };
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(hp.seed, "generate", 0));
    let (data, truth) = generate_synthetic(&hp, &cfg, &mut rng)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Other(format!("cannot create {:?}: {e}", args.out)))?;
    io::write_dataset_csv(&args.out.join("data.csv"), &data)?;
    io::write_json(
        &args.out.join("ground_truth.json"),
        &GroundTruthFile::from_truth(&truth),
    )?;
    let manifest = DatasetManifest {
        version: 1,
        feature_dim: data.feature_dim,
        num_agents: data.num_agents(),
        num_entities: data.num_entities(),
        num_events: data.num_events(),
        seed: hp.seed,
        hyperparams: hp,
        generator: cfg,
        ground_truth: Some("ground_truth.json".into()),
    };
    io::write_json(&args.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} agents, {} entities, {} events to {}",
        manifest.num_agents,
        manifest.num_entities,
        manifest.num_events,
        args.out.display()
    );
    Ok(())
}

fn load_split(
    path: &Path,
    holdout: f64,
) -> Result<(HierDataset, Option<HierDataset>), CliError> {
    check_fraction("--holdout", holdout, false)?;
    let data = io::read_dataset_csv(path)?;
    if holdout == 0.0 {
        return Ok((data, None));
    }
    let (train, held) = data.split_holdout(holdout);
    Ok((train, Some(held)))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let hp = args.hyper.to_hyperparams(0.1, args.sweeps);
    hp.validate()?;
    let (train, held) = load_split(&args.data, args.holdout)?;
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(hp.seed, "train", 0));
    let (labels, stats, trace) =
        inference::train_centralized(&train, &hp, &mut rng, held.as_ref())?;

    let ckpt = ModelCheckpoint::from_centralized(&hp, &train, &labels, &stats, hp.t);
    io::write_json(&args.model_out, &ckpt)?;
    if let Some(path) = &args.trace_out {
        io::write_sweep_trace_csv(path, &trace)?;
    }
    let last = trace.last().expect("t >= 1 guarantees a sweep");
    match last.mse_heldout {
        Some(h) => println!(
            "trained {} sweeps: mse_train {:.6}, mse_heldout {:.6}",
            hp.t, last.mse_train, h
        ),
        None => println!("trained {} sweeps: mse_train {:.6}", hp.t, last.mse_train),
    }
    Ok(())
}

fn cmd_fed_train(args: FedTrainArgs) -> Result<(), CliError> {
    let hp = args.hyper.to_hyperparams(args.gamma, args.rounds);
    hp.validate()?;
    let rc = RoundConfig {
        fraction: args.fraction,
        gamma: args.gamma,
        rounds: args.rounds,
        seed: args.hyper.seed,
    };
    rc.validate()?;
    let (train, held) = load_split(&args.data, args.holdout)?;
    let (model, trace, _memories) =
        hlcr::federated::run_federated(&train, &hp, &rc, held.as_ref())?;

    let ckpt = ModelCheckpoint::from_federated(&hp, &model, rc.seed);
    io::write_json(&args.model_out, &ckpt)?;
    if let Some(path) = &args.trace_out {
        io::write_round_trace_csv(path, &trace)?;
    }
    let last = trace.last().expect("rounds >= 1 guarantees a round");
    match last.mse_heldout {
        Some(h) => println!(
            "federated {} rounds: mse_train {:.6}, mse_heldout {:.6}",
            rc.rounds, last.mse_train, h
        ),
        None => println!(
            "federated {} rounds: mse_train {:.6}",
            rc.rounds, last.mse_train
        ),
    }
    Ok(())
}

/// Per-event predictions for a dataset under a checkpoint. Entities
/// with a stored label use it; others get a label from their own events
/// under `mode`.
fn predict_rows(
    data: &HierDataset,
    ckpt: &ModelCheckpoint,
    mode: PredictMode,
    seed: u64,
) -> Result<Vec<PredictionRow>, CliError> {
    let stats = ckpt.stats()?;
    let hp = &ckpt.hyperparams;
    let stored = ckpt.labels_for(data);
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "predict", 0));
    let mut rows = Vec::with_capacity(data.num_events());
    for (i, agent) in data.agents.iter().enumerate() {
        for (j, entity) in agent.entities.iter().enumerate() {
            let label = stored.as_ref().and_then(|s| s[i][j]);
            for (e, ev) in entity.events.iter().enumerate() {
                let (y_pred, cluster) = inference::predict_entity(
                    &entity.events,
                    &ev.x,
                    label,
                    &stats,
                    &vec![0.0; hp.k],
                    &ckpt.counts,
                    hp,
                    mode,
                    &mut rng,
                );
                rows.push(PredictionRow {
                    agent_id: agent.id.clone(),
                    entity_id: j,
                    event_index: e,
                    y_true: ev.y,
                    y_pred,
                    cluster,
                });
            }
        }
    }
    Ok(rows)
}

fn cmd_predict(args: PredictArgs) -> Result<(), CliError> {
    let data = io::read_dataset_csv(&args.data)?;
    let ckpt: ModelCheckpoint = io::read_json(&args.model)?;
    ckpt.validate_against(&data)?;
    let mode = match args.mode {
        LabelChoice::Argmax => PredictMode::Argmax,
        LabelChoice::Sample => PredictMode::Sample,
    };
    let seed = args.seed.unwrap_or(ckpt.hyperparams.seed);
    let rows = predict_rows(&data, &ckpt, mode, seed)?;
    io::write_predictions_csv(&args.out, &rows)?;
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.y_true, r.y_pred)).collect();
    println!(
        "predicted {} events: mse {:.6}",
        rows.len(),
        metrics::mse(&pairs)
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationReport {
    num_events: usize,
    num_entities: usize,
    mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ari: Option<f64>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let full = io::read_dataset_csv(&args.data)?;
    let ckpt: ModelCheckpoint = io::read_json(&args.model)?;
    ckpt.validate_against(&full)?;
    check_fraction("--holdout", args.holdout, false)?;
    let eval_data = if args.holdout == 0.0 {
        full.clone()
    } else {
        full.split_holdout(args.holdout).1
    };

    // Labels come from full entity histories even when only trailing
    // events are scored.
    let stats = ckpt.stats()?;
    let hp = &ckpt.hyperparams;
    let stored = ckpt.labels_for(&full);
    let mut assigned: Vec<Vec<usize>> = Vec::with_capacity(full.num_agents());
    let mut pairs = Vec::with_capacity(eval_data.num_events());
    for (i, agent) in full.agents.iter().enumerate() {
        let mut agent_labels = Vec::with_capacity(agent.entities.len());
        for (j, entity) in agent.entities.iter().enumerate() {
            let label = match stored.as_ref().and_then(|s| s[i][j]) {
                Some(k) => k,
                None => inference::entity_label_posterior(
                    &entity.events,
                    &stats,
                    &ckpt.counts,
                    hp,
                )
                .argmax(),
            };
            agent_labels.push(label);
            for ev in &eval_data.agents[i].entities[j].events {
                pairs.push((ev.y, inference::predict(&ev.x, label, &stats)));
            }
        }
        assigned.push(agent_labels);
    }

    let (accuracy, ari) = match &args.truth {
        Some(path) => {
            let truth_file: GroundTruthFile = io::read_json(path)?;
            let truth_labels = truth_file.labels_internal()?;
            let shapes_match = truth_labels.len() == assigned.len()
                && truth_labels
                    .iter()
                    .zip(&assigned)
                    .all(|(a, b)| a.len() == b.len());
            if !shapes_match {
                return Err(CliError::Validation(
                    "ground truth does not match the dataset's agent/entity shape"
                        .into(),
                ));
            }
            let flat_truth: Vec<usize> =
                truth_labels.iter().flatten().cloned().collect();
            let flat_pred: Vec<usize> = assigned.iter().flatten().cloned().collect();
            if flat_truth.iter().any(|&z| z >= hp.k) {
                return Err(CliError::Validation(format!(
                    "ground truth uses more than k = {} clusters",
                    hp.k
                )));
            }
            (
                Some(metrics::best_permutation_accuracy(
                    &flat_truth,
                    &flat_pred,
                    hp.k,
                )),
                Some(metrics::adjusted_rand_index(&flat_truth, &flat_pred, hp.k)),
            )
        }
        None => (None, None),
    };

    let report = EvaluationReport {
        num_events: pairs.len(),
        num_entities: full.num_entities(),
        mse: metrics::mse(&pairs),
        accuracy,
        ari,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Other(e.to_string()))?;
    println!("{json}");
    if let Some(path) = &args.out {
        io::write_text(path, &format!("{json}\n"))?;
    }
    Ok(())
}
