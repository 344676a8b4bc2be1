use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use nalgebra::Vector3;
use reach_intent::abc::{build_cache, decision_summary, evaluate, prior_densities, GridSpec, InferenceConfig, InferenceGrid, PosteriorEstimate};
use reach_intent::dataset::Dataset;
use reach_intent::priors::{default_proximity_prior, objects_prior};
use reach_intent::scene::Scene;
use reach_intent::session::{mix_cells, safe_object, PriorWeights};
use reach_intent::surrogate::{load_weights, save_weights, train_with_progress, SurrogateNet, TrainConfig};
use reach_intent::task_sim::{compute_metrics, conflicts, export_task_diagram, run_policy, summarize, task_scene, FluencyMetrics, Policy, TaskConfig};
use reach_intent::trajectory::{Simulator, Trajectory, TrajectorySource};
use reach_intent::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};

pub fn load_scene(path: Option<&Path>) -> CliResult<Scene> {
    match path {
        None => Ok(Scene::empty()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::reading(p, e.into()))?;
            Scene::from_json(&text).map_err(|e| CliError::reading(p, e))
        }
    }
}

pub fn load_surrogate(path: &Path) -> CliResult<SurrogateNet> {
    load_weights(path).map_err(|e| CliError::reading(path, e))
}

fn load_grid_spec(path: Option<&Path>) -> CliResult<GridSpec> {
    let spec = match path {
        None => GridSpec::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::reading(p, e.into()))?;
            serde_json::from_str(&text).map_err(|e| CliError::reading(p, e.into()))?
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Grid over `spec` cached from the surrogate.
pub fn surrogate_grid(spec: GridSpec, net: &SurrogateNet) -> CliResult<InferenceGrid> {
    let cache = build_cache(&spec, net)?;
    Ok(InferenceGrid::with_cache(spec, cache)?)
}

pub fn print_json(value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::writing(path, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::writing(path, e))
}

pub fn gen_dataset(count: usize, out: &Path, seed: u64, scene: Option<&Path>) -> CliResult<()> {
    if count == 0 {
        return Err(CliError::Usage("--count must be positive".into()));
    }
    let sim = Simulator::standard(load_scene(scene)?);
    let start = Instant::now();
    let dataset = Dataset::generate(&sim, count, seed)?;
    let seconds = start.elapsed().as_secs_f64();
    let mut file = create(out)?;
    dataset.write(&mut file).map_err(|e| CliError::writing(out, e))?;
    file.flush().map_err(|e| CliError::writing(out, e))?;
    print_json(&json!({
        "out": out,
        "records": dataset.len(),
        "points_per_traj": dataset.points_per_traj,
        "seconds": seconds,
        "records_per_second": count as f64 / seconds.max(1e-9),
    }))
}

pub fn train(dataset: &Path, out: &Path, config: TrainConfig) -> CliResult<()> {
    let data = Dataset::load(dataset).map_err(|e| CliError::reading(dataset, e))?;
    let start = Instant::now();
    let (net, report) = train_with_progress(&data, &config, |epoch, loss| {
        if epoch % 50 == 0 {
            info!("epoch {epoch}: loss {loss:.3e}");
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::writing(out, e))?;
    }
    save_weights(&net, out).map_err(|e| CliError::writing(out, e))?;
    print_json(&json!({
        "out": out,
        "seconds": seconds,
        "epochs": report.epochs,
        "train_records": report.train_records,
        "test_records": report.test_records,
        "initial_loss": report.initial_loss,
        "train_loss": report.train_loss,
        "test_loss": report.test_loss,
        "test_mean_point_error_m": report.test_mean_point_error,
        "sha256": net.sha256(),
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub cells: usize,
    /// Cache build from the surrogate plus one evaluation (ms).
    pub cold_ms: f64,
    pub cold_cache_ms: f64,
    pub cold_evaluate_ms: f64,
    pub warm_repeats: usize,
    pub warm_mean_ms: f64,
    pub warm_p50_ms: f64,
    pub warm_p99_ms: f64,
    pub warm_max_ms: f64,
    /// Surrogate batch generation of every cell, best of five (ms).
    pub surrogate_batch_ms: f64,
    /// Cells the simulator actually generated for its timing.
    pub simulator_cells: usize,
    /// Simulator time for every cell, scaled up from `simulator_cells` if fewer (ms).
    pub simulator_batch_ms: f64,
    pub speedup: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn bench(spec: Option<&Path>, surrogate: &Path, repeats: usize, sim_cells: Option<usize>, inference: InferenceConfig) -> CliResult<BenchReport> {
    if repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let spec = load_grid_spec(spec)?;
    let net = load_surrogate(surrogate)?;
    let prior = prior_densities(&spec, &default_proximity_prior());
    // Observation: a surrogate reach towards the middle of the grid.
    let target = spec.target(spec.index(spec.nx / 2, spec.ny / 2));
    let reach = net.forward(&target)?;

    let start = Instant::now();
    let cache = build_cache(&spec, &net)?;
    let cold_cache_ms = start.elapsed().as_secs_f64() * 1e3;
    let grid = InferenceGrid::with_cache(spec, cache)?;
    let half = reach.prefix(reach.len() / 2);
    let start = Instant::now();
    evaluate(&grid, &prior, &half, &inference)?;
    let cold_evaluate_ms = start.elapsed().as_secs_f64() * 1e3;

    let mut warm = Vec::with_capacity(repeats);
    for k in 0..repeats {
        let observed = reach.prefix(1 + k % reach.len());
        let start = Instant::now();
        evaluate(&grid, &prior, &observed, &inference)?;
        warm.push(start.elapsed().as_secs_f64() * 1e3);
    }
    warm.sort_by(f64::total_cmp);

    let targets = spec.targets();
    let mut packed = Vec::new();
    // Best of a few runs; the cold cache build above already warmed the allocator.
    let mut surrogate_batch_ms = f64::INFINITY;
    for _ in 0..5 {
        let start = Instant::now();
        net.generate_packed(&targets, &mut packed)?;
        surrogate_batch_ms = surrogate_batch_ms.min(start.elapsed().as_secs_f64() * 1e3);
    }
    let sim = Simulator::standard(Scene::empty());
    let simulator_cells = sim_cells.unwrap_or(targets.len()).clamp(1, targets.len());
    // An even spread of cells, so that the subset has the full grid's mix of reach lengths.
    let subset: Vec<Vector3<f64>> = (0..simulator_cells).map(|i| targets[i * targets.len() / simulator_cells]).collect();
    let start = Instant::now();
    sim.generate_packed(&subset, &mut packed)?;
    let simulator_batch_ms = start.elapsed().as_secs_f64() * 1e3 * targets.len() as f64 / simulator_cells as f64;

    let report = BenchReport {
        cells: spec.len(),
        cold_ms: cold_cache_ms + cold_evaluate_ms,
        cold_cache_ms,
        cold_evaluate_ms,
        warm_repeats: repeats,
        warm_mean_ms: warm.iter().sum::<f64>() / repeats as f64,
        warm_p50_ms: percentile(&warm, 0.5),
        warm_p99_ms: percentile(&warm, 0.99),
        warm_max_ms: warm[repeats - 1],
        surrogate_batch_ms,
        simulator_cells,
        simulator_batch_ms,
        speedup: simulator_batch_ms / surrogate_batch_ms,
    };
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
struct RunRecord {
    policy: Policy,
    seed: u64,
    metrics: FluencyMetrics,
    conflicts: usize,
    log: PathBuf,
    diagram: PathBuf,
}

pub fn simulate(policies: &[Policy], seeds: usize, out: &Path, surrogate: Option<&Path>, config: &TaskConfig) -> CliResult<()> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be positive".into()));
    }
    fs::create_dir_all(out).map_err(|e| CliError::writing(out, e))?;
    let grid = if policies.contains(&Policy::IntentPrediction) {
        let mut grid = InferenceGrid::new(GridSpec::default())?;
        match surrogate {
            Some(path) => grid.rebuild(&load_surrogate(path)?)?,
            None => grid.rebuild(&Simulator::standard(Scene::empty()))?,
        };
        Some(grid)
    } else {
        None
    };
    let mut runs: BTreeMap<String, Vec<(u64, FluencyMetrics)>> = BTreeMap::new();
    let mut records = Vec::new();
    for seed in 0..seeds as u64 {
        let scene = task_scene(config.objects, config.min_separation, seed)?;
        for &policy in policies {
            let log = run_policy(policy, &scene, grid.as_ref(), config, seed)?;
            let metrics = compute_metrics(&log)?;
            let stem = format!("{}_seed{seed}", policy.name());
            let log_path = out.join(format!("{stem}.jsonl"));
            let mut file = create(&log_path)?;
            log.write_jsonl(&mut file).map_err(|e| CliError::writing(&log_path, e))?;
            file.flush().map_err(|e| CliError::writing(&log_path, e))?;
            let diagram = out.join(format!("{stem}.svg"));
            fs::write(&diagram, export_task_diagram(&log)).map_err(|e| CliError::writing(&diagram, e))?;
            runs.entry(policy.name().to_string()).or_default().push((seed, metrics));
            records.push(RunRecord {
                policy,
                seed,
                metrics,
                conflicts: conflicts(&log, &scene, config.conflict_radius),
                log: log_path,
                diagram,
            });
        }
    }
    let summaries: Vec<_> = policies.iter().map(|p| summarize(*p, &runs[p.name()])).collect();
    let path = out.join("metrics.json");
    let text = serde_json::to_string_pretty(&json!({ "runs": records, "summaries": summaries }))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::writing(&path, e))?;
    print_json(&summaries)
}

/// Observed trajectory given as JSON instead of a dataset record.
#[derive(Deserialize)]
struct TrajectoryFile {
    dt: Option<f64>,
    points: Vec<[f64; 3]>,
}

/// Reads an ITRJ dataset record (picked by `index`) or a JSON
/// `{"dt": .., "points": [[x, y, z], ..]}` file.
fn load_observation(path: &Path, index: usize) -> CliResult<(Trajectory, Option<Vector3<f64>>)> {
    let bytes = fs::read(path).map_err(|e| CliError::reading(path, e.into()))?;
    if bytes.starts_with(b"ITRJ") {
        let data = Dataset::read(&mut bytes.as_slice()).map_err(|e| CliError::reading(path, e))?;
        if index >= data.len() {
            return Err(CliError::Usage(format!("--index {index} but the dataset has {} records", data.len())));
        }
        return Ok((data.trajectory(index), Some(data.target(index))));
    }
    let file: TrajectoryFile = serde_json::from_slice(&bytes).map_err(|e| CliError::reading(path, e.into()))?;
    let dt = file.dt.unwrap_or(1.0 / reach_intent::config::SAMPLE_RATE);
    let points = file.points.into_iter().map(Vector3::from).collect();
    Ok((Trajectory::new(points, dt), None))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub observed_points: usize,
    pub total_points: usize,
    pub map_cell: usize,
    pub map_point: [f64; 3],
    pub n_effective: f64,
    pub degenerate_evidence: bool,
    /// Dataset target, when the observation came from a dataset.
    pub target: Option<[f64; 3]>,
    pub target_cell: Option<usize>,
    pub object_probs: BTreeMap<u32, f64>,
    pub safe_object: Option<u32>,
}

pub struct InferArgs<'a> {
    pub surrogate: &'a Path,
    pub scene: Option<&'a Path>,
    pub trajectory: &'a Path,
    pub emit_posterior: Option<&'a Path>,
    pub index: usize,
    pub fraction: f64,
    pub inference: InferenceConfig,
    pub prior_weights: PriorWeights,
    pub conflict_radius: f64,
    pub p_safe: f64,
}

/// Posterior from the first `fraction` of a trajectory, with a prior mixing
/// proximity and (if the scene has any) the objects.
pub fn infer_file(args: &InferArgs<'_>) -> CliResult<(InferReport, PosteriorEstimate)> {
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return Err(CliError::Usage(format!("--fraction must be in (0, 1], got {}", args.fraction)));
    }
    let scene = load_scene(args.scene)?;
    let net = load_surrogate(args.surrogate)?;
    let (trajectory, target) = load_observation(args.trajectory, args.index)?;
    if trajectory.is_empty() {
        return Err(CliError::Data(format!("{}: empty trajectory", args.trajectory.display())));
    }
    let grid = surrogate_grid(GridSpec::default(), &net)?;
    let proximity = prior_densities(&grid.spec, &default_proximity_prior());
    let objects = match objects_prior(&scene) {
        Ok(p) => Some(prior_densities(&grid.spec, &p)),
        Err(Error::EmptyScene) => None,
        Err(e) => return Err(e.into()),
    };
    let mut parts: Vec<(f64, &[f64])> = vec![(args.prior_weights.proximity, &proximity)];
    if let Some(o) = &objects {
        parts.push((args.prior_weights.objects, o));
    }
    let prior = mix_cells(&parts, grid.spec.len());
    let observed_points = ((trajectory.len() as f64 * args.fraction).round() as usize).clamp(1, trajectory.len());
    let posterior = evaluate(&grid, &prior, &trajectory.prefix(observed_points), &args.inference)?;
    let object_probs = decision_summary(&posterior, &scene, args.conflict_radius);
    let report = InferReport {
        observed_points,
        total_points: trajectory.len(),
        map_cell: posterior.map_cell,
        map_point: posterior.map_point.into(),
        n_effective: posterior.n_effective,
        degenerate_evidence: posterior.degenerate_evidence,
        target: target.map(Into::into),
        target_cell: target.and_then(|t| grid.spec.cell_of(&t.xy())),
        safe_object: safe_object(&object_probs, &scene, args.p_safe, &[]),
        object_probs,
    };
    if let Some(path) = args.emit_posterior {
        let mut file = create(path)?;
        let written = if path.extension().is_some_and(|e| e == "json") {
            serde_json::to_writer(&mut file, &posterior.to_json()).map_err(Error::from)
        } else {
            posterior.write_ipos(&mut file)
        };
        written.map_err(|e| CliError::writing(path, e))?;
        file.flush().map_err(|e| CliError::writing(path, e))?;
    }
    Ok((report, posterior))
}

/// Grid, scene and session defaults for the inference service.
pub fn serve_state(surrogate: &Path, scene: Option<&Path>, config: reach_intent::session::SessionConfig) -> CliResult<crate::serve::Shared> {
    let scene = load_scene(scene)?;
    let net = load_surrogate(surrogate)?;
    let grid = surrogate_grid(GridSpec::default(), &net)?;
    Ok(crate::serve::Shared {
        grid: Arc::new(grid),
        scene,
        config,
    })
}
