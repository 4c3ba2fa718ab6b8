use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use fpf_gain::fpf::{run_experiment, ExperimentConfig, FilterRun};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{CliError, Context};
use crate::manifest::{write_json, write_manifest};

/// Filtering experiment: Kalman, FPF-Galerkin, FPF-kernel and the exact posterior.
#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    /// Experiment configuration (JSON). Without it the bimodal benchmark runs on seeds 1..=20.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configuration's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for the seed fan-out (default: available parallelism).
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn load_config(args: &FilterArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => ExperimentConfig::benchmark((1..=20).collect(), "out/filter"),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.display().to_string();
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Config("no seeds configured".into()));
    }
    Ok(cfg)
}

fn last_finite(series: &[f64]) -> Option<f64> {
    series.last().copied().filter(|v| v.is_finite())
}

fn run_summary(run: &FilterRun) -> Value {
    json!({
        "method": run.method.name(),
        "final_t": run.times.last(),
        "mean": last_finite(&run.mean_series),
        "prob_gt_half": last_finite(&run.prob_series),
        "prob_near_x0": last_finite(&run.prob_near_x0_series),
        "diverged_at_t": run.diverged_at_t(),
        "failure": run.failure.as_ref().map(|f| f.message.clone()),
    })
}

fn write_seed(dir: &Path, runs: &[FilterRun]) -> Result<Vec<String>, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for run in runs {
        let name = format!("{}.csv", run.method.name());
        run.save_csv(&dir.join(&name)).context("writing series")?;
        files.push(name);
        if run.particle_history.is_some() {
            let name = format!("particles_{}.csv", run.method.name());
            let file = std::fs::File::create(dir.join(&name))?;
            run.write_particles_csv(file).context("writing particles")?;
            files.push(name);
        }
    }
    Ok(files)
}

fn aggregate(per_seed: &[(u64, Vec<FilterRun>)]) -> Value {
    let mut out = serde_json::Map::new();
    let Some((_, first)) = per_seed.first() else {
        return Value::Object(out);
    };
    for (k, run) in first.iter().enumerate() {
        let runs: Vec<&FilterRun> = per_seed.iter().map(|(_, r)| &r[k]).collect();
        let finals: Vec<f64> = runs.iter().filter_map(|r| last_finite(&r.prob_series)).collect();
        let above = finals.iter().filter(|p| **p > 0.5).count();
        out.insert(
            format!("{}#{k}", run.method.name()),
            json!({
                "method": run.method.name(),
                "runs": runs.len(),
                "failed": runs.iter().filter(|r| r.failure.is_some()).count(),
                "completed": finals.len(),
                "prob_gt_half_above_half": above,
                "mean_final_prob_gt_half": if finals.is_empty() { None } else { Some(finals.iter().sum::<f64>() / finals.len() as f64) },
            }),
        );
    }
    Value::Object(out)
}

pub fn run(args: &FilterArgs) -> Result<Value, CliError> {
    let cfg = load_config(args)?;
    let root = PathBuf::from(&cfg.output_dir);
    std::fs::create_dir_all(&root)?;

    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, cfg.seeds.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Vec<FilterRun>, CliError>>>> =
        Mutex::new((0..cfg.seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = cfg.seeds.get(k) else { break };
                let outcome = run_experiment(&cfg, seed)
                    .context(&format!("seed {seed}"))
                    .and_then(|runs| write_seed(&root.join(format!("seed_{seed}")), &runs).map(|_| runs));
                results.lock().expect("result slots")[k] = Some(outcome);
            });
        }
    });

    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for (seed, slot) in cfg.seeds.iter().zip(results.into_inner().expect("result slots")) {
        per_seed.push((*seed, slot.expect("every seed is processed")?));
    }
    let summary = json!({
        "seeds": per_seed
            .iter()
            .map(|(seed, runs)| json!({ "seed": seed, "runs": runs.iter().map(run_summary).collect::<Vec<_>>() }))
            .collect::<Vec<_>>(),
        "aggregate": aggregate(&per_seed),
    });
    write_json(&root.join("summary.json"), &summary)?;
    let files: Vec<String> = cfg.seeds.iter().map(|s| format!("seed_{s}/")).chain(["summary.json".to_string()]).collect();
    write_manifest(&root, "filter", &cfg, &files)?;
    Ok(summary)
}
