//! Command-line driver: simulate benchmark scenarios, fit models, predict
//! surfaces, aggregate regions, trace partial dependence, and run the full
//! benchmark study.
//!
//! Every subcommand reads an optional `--config <json>` whose unknown keys
//! are rejected, takes `--seed` where randomness is involved, and writes its
//! artifacts under `--out-dir`. The worker-thread count honours the
//! `GEOBART_THREADS` environment variable.

mod benchmark;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use geobart::data::{load_dataset, ColumnMapping, SpatialDataset};
use geobart::error::{Error, Result};
use geobart::predict::{
    aggregate_areal, align_truth, compute_metrics, load_prediction_points, load_regions,
    load_truth, partial_dependence, pd_grid, predict_surface, summarize_surface, write_pd_csv,
    write_regions_csv, write_surface_csv, SurfaceDraws,
};
use geobart::sampler::{
    fit, prepare, read_draws, run_chain, write_draws, Checkpoint, CheckpointSpec, ChainOutput,
    Draw, FitResult, Manifest, RunConfig,
};
use geobart::simgen::{simulate_scenario, write_scenario, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "geobart",
    version,
    about = "Spatial regression with Bayesian additive trees and a Matérn field"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark scenario.
    Simulate(SimulateArgs),
    /// Fit a model to clustered spatial data.
    Fit(FitArgs),
    /// Predict the regression surface at a set of points.
    Predict(PredictArgs),
    /// Aggregate a predicted surface into density-weighted regions.
    Aggregate(AggregateArgs),
    /// Trace the partial dependence of the tree component on one covariate.
    Pd(PdArgs),
    /// Run the simulation benchmark across scenarios and models.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for data.csv, grid.csv, truth.csv, scenario.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Scenario configuration JSON (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured covariate weight ω.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    /// Training data CSV (cluster_id,x,y,response,covariates…).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for manifest.json and draws_chain_<i>.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Run configuration JSON (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Column-mapping JSON for non-default CSV headers.
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Resume interrupted chains from checkpoints in the output directory
    /// (requires the identical configuration and seed).
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct PredictArgs {
    /// Directory holding manifest.json and draw files from `fit`.
    #[arg(long)]
    fit_dir: PathBuf,
    /// The training data the model was fitted to.
    #[arg(long)]
    data: PathBuf,
    /// Prediction points CSV (cell_id,x,y,covariates…).
    #[arg(long)]
    grid: PathBuf,
    /// Output directory for surface.csv (and metrics.json with --truth).
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Interval level α (default: the fitted configuration's).
    #[arg(long)]
    alpha: Option<f64>,
    /// Truth CSV (cell_id,truth) to score the prediction against.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Where to write metrics (default <out-dir>/metrics.json).
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    fit_dir: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    /// Region spec CSV (cell_id,region[,density]).
    #[arg(long)]
    regions: PathBuf,
    /// Output directory for regions.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Args)]
struct PdArgs {
    #[arg(long)]
    fit_dir: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Covariate name to trace.
    #[arg(long)]
    var: String,
    /// Number of evenly spaced grid values over the observed range.
    #[arg(long, default_value_t = 20)]
    points: usize,
    /// Output directory for pd_<var>.csv.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mapping: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Output directory for benchmark_results.csv, benchmark_summary.csv,
    /// benchmark_summary.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Benchmark configuration JSON (unknown keys rejected).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    geobart::parallel::configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Aggregate(a) => cmd_aggregate(a),
        Command::Pd(a) => cmd_pd(a),
        Command::Benchmark(a) => benchmark::cmd_benchmark(a.out_dir, a.config, a.seed),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_mapping(path: &Option<PathBuf>) -> Result<Option<ColumnMapping>> {
    path.as_ref().map(|p| ColumnMapping::from_json_file(p)).transpose()
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ScenarioConfig::from_json_file(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(w) = a.omega {
        cfg.omega = w;
        cfg.validate()?;
    }
    let scenario = simulate_scenario(&cfg, a.seed)?;
    write_scenario(&a.out_dir, &scenario)?;
    log::info!(
        "simulated ω = {} scenario: {} clusters, {} observations, {} grid cells → {}",
        cfg.omega,
        scenario.dataset.n_clusters(),
        scenario.dataset.n_obs(),
        scenario.grid.ids.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn chain_draw_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("draws_chain_{chain}.jsonl"))
}

fn chain_checkpoint_path(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("checkpoint_chain_{chain}.json"))
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let mapping = load_mapping(&a.mapping)?;
    let dataset = load_dataset(&a.data, mapping.as_ref())?;
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&a.out_dir)?;
    log::info!(
        "fitting {} to {} clusters / {} observations ({} chains × {} sweeps)",
        cfg.model.label(),
        dataset.n_clusters(),
        dataset.n_obs(),
        cfg.chains,
        cfg.iterations
    );

    let fit_result = if cfg.checkpoint_every > 0 || a.resume {
        fit_with_checkpoints(&dataset, &cfg, &a.out_dir, a.resume)?
    } else {
        fit(&dataset, &cfg)?
    };

    let manifest = Manifest::from_fit(&dataset, &fit_result);
    manifest.save(&a.out_dir.join("manifest.json"))?;
    for chain in &fit_result.chains {
        write_draws(&chain_draw_path(&a.out_dir, chain.chain_index), &chain.draws)?;
        log::info!(
            "chain {}: {} draws, acceptance {}",
            chain.chain_index,
            chain.draws.len(),
            chain.acceptance.summary()
        );
        // A finished chain's checkpoint would only invite a stale resume.
        let cp = chain_checkpoint_path(&a.out_dir, chain.chain_index);
        if cp.exists() {
            std::fs::remove_file(&cp)?;
        }
    }
    log::info!("wrote manifest and draws to {}", a.out_dir.display());
    Ok(())
}

/// Like [`geobart::sampler::fit`], but wiring periodic checkpoints and
/// resume through to each chain.
fn fit_with_checkpoints(
    dataset: &SpatialDataset,
    cfg: &RunConfig,
    out_dir: &Path,
    resume: bool,
) -> Result<FitResult> {
    let ctx = prepare(dataset, cfg)?;
    let chains: Vec<Result<ChainOutput>> =
        geobart::parallel::par_map((0..cfg.chains).collect::<Vec<_>>(), |i| {
            let cp_path = chain_checkpoint_path(out_dir, i);
            let resume_cp = if resume && cp_path.exists() {
                let cp = Checkpoint::load(&cp_path)?;
                log::info!("chain {i}: resuming from sweep {}", cp.next_sweep);
                Some(cp)
            } else {
                None
            };
            let spec = CheckpointSpec { path: &cp_path, every: cfg.checkpoint_every };
            let spec_opt = (cfg.checkpoint_every > 0).then_some(&spec);
            run_chain(dataset, cfg, &ctx, i, resume_cp, spec_opt)
        });
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(FitResult {
        config: cfg.clone(),
        chains,
        calibration: ctx.calibration,
        mesh: ctx.mesh,
        mesh_config: ctx.mesh_config,
        sigma_mu2: ctx.sigma_mu2,
    })
}

/// Loads the manifest and all chain draw files written by `fit`.
fn load_fit(dir: &Path) -> Result<(Manifest, Vec<Draw>)> {
    let manifest = Manifest::load(&dir.join("manifest.json"))?;
    let mut draws = Vec::new();
    for chain in 0..manifest.config.chains {
        let path = chain_draw_path(dir, chain);
        if !path.exists() {
            return Err(Error::CheckpointMismatch(format!(
                "missing draw file {} for chain {chain}",
                path.display()
            )));
        }
        draws.extend(read_draws(&path)?);
    }
    if draws.is_empty() {
        return Err(Error::EmptyInput("fit directory holds no draws".into()));
    }
    Ok((manifest, draws))
}

/// The data file must be the one the model was fitted to; otherwise the
/// stored transforms and draws are meaningless.
fn check_dataset_matches(dataset: &SpatialDataset, manifest: &Manifest) -> Result<()> {
    if dataset.n_clusters() != manifest.n_clusters
        || dataset.n_obs() != manifest.n_obs
        || dataset.covariate_names() != manifest.covariate_names.as_slice()
        || *dataset.response_transform() != manifest.response_transform
        || dataset.covariate_transforms() != manifest.covariate_transforms.as_slice()
    {
        return Err(Error::CheckpointMismatch(
            "data file does not match the fitted manifest".into(),
        ));
    }
    Ok(())
}

/// Shared predict/aggregate plumbing: load everything and draw surfaces.
fn surface_from_fit(
    fit_dir: &Path,
    data: &Path,
    grid: &Path,
    mapping: &Option<PathBuf>,
    seed: u64,
) -> Result<(Manifest, SpatialDataset, SurfaceDraws)> {
    let (manifest, draws) = load_fit(fit_dir)?;
    let mapping = load_mapping(mapping)?;
    let dataset = load_dataset(data, mapping.as_ref())?;
    check_dataset_matches(&dataset, &manifest)?;
    let pts = load_prediction_points(grid, &manifest.covariate_names)?;
    let surface = predict_surface(
        &dataset,
        &manifest.config,
        manifest.mesh.as_ref(),
        &draws,
        &pts,
        seed,
    )?;
    Ok((manifest, dataset, surface))
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let (manifest, _dataset, surface) =
        surface_from_fit(&a.fit_dir, &a.data, &a.grid, &a.mapping, a.seed)?;
    let alpha = a.alpha.unwrap_or(manifest.config.alpha);
    let summary = summarize_surface(&surface, alpha);
    std::fs::create_dir_all(&a.out_dir)?;
    write_surface_csv(&a.out_dir.join("surface.csv"), &summary)?;
    log::info!(
        "predicted {} points from {} draws → {}",
        summary.ids.len(),
        surface.values.nrows(),
        a.out_dir.join("surface.csv").display()
    );
    if let Some(truth_path) = &a.truth {
        let truth = align_truth(&summary.ids, &load_truth(truth_path)?)?;
        let metrics = compute_metrics(&truth, &summary)?;
        let out = a
            .metrics_out
            .clone()
            .unwrap_or_else(|| a.out_dir.join("metrics.json"));
        std::fs::write(&out, serde_json::to_string_pretty(&metrics)?)?;
        log::info!(
            "metrics: rmse {:.4} ail {:.4} acr {:.3} ais {:.4} → {}",
            metrics.rmse,
            metrics.ail,
            metrics.acr,
            metrics.ais,
            out.display()
        );
    }
    Ok(())
}

fn cmd_aggregate(a: AggregateArgs) -> Result<()> {
    let (manifest, _dataset, surface) =
        surface_from_fit(&a.fit_dir, &a.data, &a.grid, &a.mapping, a.seed)?;
    let alpha = a.alpha.unwrap_or(manifest.config.alpha);
    let spec = load_regions(&a.regions)?;
    let regions = aggregate_areal(&surface, &spec, alpha)?;
    std::fs::create_dir_all(&a.out_dir)?;
    write_regions_csv(&a.out_dir.join("regions.csv"), &regions)?;
    log::info!(
        "aggregated {} regions → {}",
        regions.len(),
        a.out_dir.join("regions.csv").display()
    );
    Ok(())
}

fn cmd_pd(a: PdArgs) -> Result<()> {
    let (manifest, draws) = load_fit(&a.fit_dir)?;
    let mapping = load_mapping(&a.mapping)?;
    let dataset = load_dataset(&a.data, mapping.as_ref())?;
    check_dataset_matches(&dataset, &manifest)?;
    let var = dataset
        .covariate_names()
        .iter()
        .position(|n| n == &a.var)
        .ok_or_else(|| Error::MissingColumn(a.var.clone()))?;
    let alpha = a.alpha.unwrap_or(manifest.config.alpha);
    let grid = pd_grid(&dataset, var, a.points);
    let pd = partial_dependence(&dataset, &draws, var, &grid, alpha)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let out = a.out_dir.join(format!("pd_{}.csv", a.var));
    write_pd_csv(&out, &pd)?;
    log::info!("partial dependence on `{}` over {} values → {}", a.var, grid.len(), out.display());
    Ok(())
}
