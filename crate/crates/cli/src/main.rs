use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use favla::io::config::RunConfig;
use favla::io::dataset::Dataset;
use favla::io::report::{
    ablation_csv, anticipation_csv, contact_anticipation, find_traces, read_trace,
    trace_file_name, write_json, EpisodeTrace, EvalReport, ModeSummary,
};
use favla::io::svg::{ablation_chart, trace_chart};
use favla::model::Policy;
use favla::runtime::{run_episodes, ScheduleMode};
use favla::simsuite::{episode_seed, TaskKind, EVAL_STREAM};
use favla::training::{generate_dataset, train, MODEL_FILE};

#[derive(Parser)]
#[command(name = "favla", version, about = "Force-adaptive fast-slow policy: data, training and evaluation")]
struct Cli {
    /// Root that all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted demonstrations and write a labeled dataset.
    GenData {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        episodes: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a policy from scratch on a dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeded closed-loop episodes under one schedule mode.
    Eval {
        #[command(flatten)]
        common: EvalArgs,
        /// `adaptive` or `fixed:<n>`.
        #[arg(long, default_value = "adaptive")]
        mode: ScheduleMode,
    },
    /// Evaluate fixed:1, fixed:2, fixed:N_max and adaptive on shared seeds.
    Ablate {
        #[command(flatten)]
        common: EvalArgs,
    },
    /// Render trace files as time-series charts.
    Report {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint manifest, or the training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: TaskKind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    episodes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<favla::Error> for Failure {
    fn from(e: favla::Error) -> Self {
        match e {
            favla::Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(workdir: &Path, path: &Option<PathBuf>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => {
            let p = workdir.join(p);
            if !p.is_file() {
                return Err(Failure::Usage(format!("config file {} not found", p.display())));
            }
            Ok(RunConfig::load(&p)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn threads() -> usize {
    let cap = std::env::var("FAVLA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    cap.map_or(avail, |c| c.min(avail))
}

fn load_policy(workdir: &Path, checkpoint: &Path) -> Result<Policy, Failure> {
    let mut path = workdir.join(checkpoint);
    if path.is_dir() {
        path = path.join(MODEL_FILE);
    }
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(Policy::load(&path)?)
}

fn mode_dir(mode: ScheduleMode) -> String {
    mode.to_string().replace(':', "_")
}

/// Runs one mode and writes its traces under `trace_dir`.
fn evaluate(
    cfg: &RunConfig,
    policy: &Policy,
    args: &EvalArgs,
    mode: ScheduleMode,
    trace_dir: &Path,
) -> Result<ModeSummary, Failure> {
    let spec = cfg.task_spec(args.task)?;
    let schedule = cfg.schedule.with_mode(mode);
    schedule.validate(policy.model.horizon())?;
    let seeds: Vec<u64> = (0..args.episodes)
        .map(|i| episode_seed(args.seed, EVAL_STREAM, i))
        .collect();
    let results = run_episodes(&spec, policy, &schedule, &seeds, threads())?;
    for r in &results {
        let trace = EpisodeTrace::new(args.task, mode, schedule.n_max, policy.label.clone(), r.clone());
        write_json(&trace_dir.join(trace_file_name(r.seed)), &trace)?;
    }
    Ok(ModeSummary::from_results(args.task, mode, &results))
}

fn print_rows(rows: &[ModeSummary]) {
    for r in rows {
        println!(
            "{} {:>9}: success {}/{} ({:.0}%), mean peak force {:.2} N, mean AE calls {:.1}",
            r.task,
            r.mode.to_string(),
            r.successes,
            r.episodes,
            100.0 * r.success_rate,
            r.mean_peak_force,
            r.mean_ae_calls
        );
    }
}

fn run(cli: Cli) -> CmdResult {
    let wd = &cli.workdir;
    match cli.command {
        Command::GenData {
            task,
            episodes,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(wd, &config)?;
            let spec = cfg.task_spec(task)?;
            let tau = cfg.slow_model.tcn.window;
            let s = generate_dataset(&spec, episodes as usize, seed, &cfg.labeling, tau, &wd.join(&out))?;
            println!(
                "dataset {}: {} episodes, {} frames, {} dropped, sigma {:.4}",
                out.display(),
                s.episodes,
                s.frames,
                s.dropped,
                s.sigma
            );
            let deciles: Vec<String> = s.label_deciles.iter().map(|d| format!("{d:.3}")).collect();
            println!("label deciles: {}", deciles.join(" "));
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(wd, &config)?;
            let data = wd.join(data);
            if !data.join(favla::io::dataset::MANIFEST_FILE).is_file() {
                return Err(Failure::Usage(format!("no dataset at {}", data.display())));
            }
            let dataset = Dataset::load(&data)?;
            let s = train(
                &cfg.model(),
                &cfg.training,
                cfg.schedule.executed_steps,
                &dataset,
                cfg.seed,
                &wd.join(&out),
            )?;
            println!(
                "trained {} iterations on {} episodes: final loss {:.4}, held-out variance MAE {}",
                s.iterations,
                s.train_episodes,
                s.final_loss,
                s.holdout_variance_mae.map_or("n/a".into(), |m| format!("{m:.4}"))
            );
        }
        Command::Eval { common, mode } => {
            let cfg = load_config(wd, &common.config)?;
            let policy = load_policy(wd, &common.checkpoint)?;
            let out = wd.join(&common.out);
            let row = evaluate(&cfg, &policy, &common, mode, &out.join("traces"))?;
            let report = EvalReport::new(
                common.checkpoint.display().to_string(),
                common.task,
                common.seed,
                vec![row],
            );
            write_json(&out.join("report.json"), &report)?;
            print_rows(&report.rows);
        }
        Command::Ablate { common } => {
            let cfg = load_config(wd, &common.config)?;
            let policy = load_policy(wd, &common.checkpoint)?;
            let out = wd.join(&common.out);
            let mut modes: Vec<ScheduleMode> = [1, 2, cfg.schedule.n_max]
                .into_iter()
                .filter(|&n| n <= cfg.schedule.n_max)
                .map(ScheduleMode::Fixed)
                .collect();
            modes.dedup();
            modes.push(ScheduleMode::Adaptive);
            let rows = modes
                .iter()
                .map(|&m| evaluate(&cfg, &policy, &common, m, &out.join("traces").join(mode_dir(m))))
                .collect::<Result<Vec<_>, _>>()?;
            let report = EvalReport::new(
                common.checkpoint.display().to_string(),
                common.task,
                common.seed,
                rows,
            );
            write_json(&out.join("report.json"), &report)?;
            let csv = out.join("ablation.csv");
            fs::write(&csv, ablation_csv(&report.rows)).map_err(|e| Failure::Runtime(format!("{}: {e}", csv.display())))?;
            let svg = out.join("ablation.svg");
            fs::write(&svg, ablation_chart(&report.rows)).map_err(|e| Failure::Runtime(format!("{}: {e}", svg.display())))?;
            print_rows(&report.rows);
        }
        Command::Report { traces, out } => {
            let dir = wd.join(&traces);
            if !dir.is_dir() {
                return Err(Failure::Usage(format!("trace directory {} not found", dir.display())));
            }
            let files = find_traces(&dir)?;
            if files.is_empty() {
                return Err(Failure::Usage(format!("no trace files under {}", dir.display())));
            }
            let out = wd.join(&out);
            let mut loaded = Vec::with_capacity(files.len());
            for f in &files {
                let t = read_trace(f)?;
                let rel = f.strip_prefix(&dir).unwrap_or(f).with_extension("svg");
                let path = out.join(rel);
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|e| Failure::Runtime(format!("{}: {e}", parent.display())))?;
                }
                fs::write(&path, trace_chart(&t)).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
                loaded.push(t);
            }
            let csv = out.join("anticipation.csv");
            fs::write(&csv, anticipation_csv(&loaded)).map_err(|e| Failure::Runtime(format!("{}: {e}", csv.display())))?;
            let hits = loaded
                .iter()
                .filter(|t| contact_anticipation(&t.episode).anticipates)
                .count();
            println!(
                "rendered {} traces; rate rises before first contact in {}/{}",
                loaded.len(),
                hits,
                loaded.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
