use clap::{CommandFactory, Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use yawplan::bench::{gen_instances, run_benchmark, summary_table, write_results, Method};
use yawplan::tracksim::{run_tracking, write_log_csv, write_metrics};
use yawplan::traversal::solve_traversal;
use yawplan::yawqp::{PlanStatus, YawRepr, YawTrajectory};

use yawplan_cli::config::{
    load_config, schema_help, BenchFileConfig, PlanConfig, TrackConfig,
};

#[derive(Parser)]
#[command(
    name = "yawplan",
    about = "Quadrotor trajectory planning with a global, singularity-free yaw parameterization",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one traversal problem from a config file and write the sampled
    /// trajectory plus a cost summary.
    Plan {
        /// TOML problem description.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for trajectory.csv, virtual_yaw.csv, summary.txt.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run the randomized yaw-planner benchmark and write a results CSV.
    Bench {
        /// Number of instances.
        #[arg(short = 'n', long = "count", default_value_t = 100)]
        n: usize,
        /// Master seed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated subset of virtual,wrapped,unwrapped.
        #[arg(long, default_value = "virtual,wrapped,unwrapped")]
        methods: String,
        /// Results CSV path.
        #[arg(long, default_value = "bench_results.csv")]
        out: PathBuf,
        /// Optional TOML file with [bench]/[limits] generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the receding-horizon tracking simulation and write the log and
    /// metrics files.
    Track {
        /// TOML scenario description.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for tracking_log.csv and metrics.txt.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Pull `--section.key=value` overrides out of the raw argument list; clap
/// sees everything else.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let is_override = arg.strip_prefix("--").is_some_and(|rest| {
            rest.split_once('=')
                .is_some_and(|(path, _)| path.contains('.'))
        });
        if is_override {
            let rest = arg.trim_start_matches("--");
            let (path, value) = rest.split_once('=').expect("checked above");
            overrides.push((path.to_string(), value.to_string()));
        } else {
            plain.push(arg);
        }
    }
    (plain, overrides)
}

fn read_config_file(path: &Path) -> Result<String, String> {
    fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))
}

fn write_file(path: &Path, content: &[u8]) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
        }
    }
    fs::write(path, content).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn cmd_plan(
    config_path: &Path,
    out_dir: &Path,
    overrides: &[(String, String)],
) -> Result<u8, String> {
    let text = read_config_file(config_path)?;
    let cfg: PlanConfig = load_config(&text, overrides)?;
    let problem = cfg.to_problem()?;
    let solution = solve_traversal(&problem, None).map_err(|e| e.to_string())?;

    // Sampled trajectory: position plus the realized yaw angle and rates.
    let yaw_traj = YawTrajectory {
        repr: YawRepr::Virtual(solution.virtual_yaw_traj.clone()),
        limits: problem.limits.yaw,
        status: PlanStatus::Success,
    };
    let total = solution.position_traj.total_duration();
    let hz = cfg.output.sample_hz;
    let mut csv = Vec::new();
    writeln!(csv, "t,px,py,pz,yaw,omega,alpha").unwrap();
    let steps = (total * hz).ceil() as usize;
    for i in 0..=steps {
        let t = (i as f64 / hz).min(total);
        let p = solution.position_traj.eval(t, 0).map_err(|e| e.to_string())?;
        let (yaw, omega, alpha) = yaw_traj.sample(t).map_err(|e| e.to_string())?;
        writeln!(
            csv,
            "{t:.6},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            p[0], p[1], p[2], yaw, omega, alpha
        )
        .unwrap();
        if t >= total {
            break;
        }
    }
    write_file(&out_dir.join("trajectory.csv"), &csv)?;

    let mut virt = Vec::new();
    solution
        .virtual_yaw_traj
        .write_samples_csv(2, hz, &mut virt)
        .map_err(|e| e.to_string())?;
    write_file(&out_dir.join("virtual_yaw.csv"), &virt)?;

    let mut summary = String::new();
    summary.push_str(&format!("converged={}\n", solution.converged));
    summary.push_str(&format!("iterations={}\n", solution.iterations));
    summary.push_str(&format!("final_cost={:.9}\n", solution.final_cost));
    for (name, value) in solution.breakdown.entries() {
        summary.push_str(&format!("cost.{name}={value:.9}\n"));
    }
    summary.push_str(&format!("total_duration={total:.6}\n"));
    write_file(&out_dir.join("summary.txt"), summary.as_bytes())?;
    print!("{summary}");

    Ok(if solution.converged { 0 } else { 2 })
}

fn cmd_bench(
    n: usize,
    seed: u64,
    methods: &str,
    out: &Path,
    config_path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<u8, String> {
    if n == 0 {
        return Err("instance count must be at least 1".into());
    }
    let file_cfg: BenchFileConfig = match config_path {
        Some(p) => load_config(&read_config_file(p)?, overrides)?,
        None => load_config("", overrides)?,
    };
    let config = file_cfg.to_config();
    let methods: Vec<Method> = methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Method::parse)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;

    let instances = gen_instances(seed, n, &config).map_err(|e| e.to_string())?;
    let results = run_benchmark(&instances, &methods, &config).map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_results(&results, &mut buf).map_err(|e| e.to_string())?;
    write_file(out, &buf)?;
    println!("{n} instances, master seed {seed} -> {}", out.display());
    print!("{}", summary_table(&results));
    Ok(0)
}

fn cmd_track(
    config_path: &Path,
    out_dir: &Path,
    overrides: &[(String, String)],
) -> Result<u8, String> {
    let text = read_config_file(config_path)?;
    let cfg: TrackConfig = load_config(&text, overrides)?;
    let (model, config) = cfg.to_parts()?;
    let (metrics, log) = run_tracking(&model, &config).map_err(|e| e.to_string())?;

    let mut csv = Vec::new();
    write_log_csv(&log, &mut csv).map_err(|e| e.to_string())?;
    write_file(&out_dir.join("tracking_log.csv"), &csv)?;
    let mut mfile = Vec::new();
    write_metrics(&metrics, &mut mfile).map_err(|e| e.to_string())?;
    write_file(&out_dir.join("metrics.txt"), &mfile)?;

    println!("tracking {:.0} s at {:.0} Hz replanning", config.sim_duration, config.replan_hz);
    println!(
        "{:<18} {:>10} {:>10}",
        "metric", "avg", "std"
    );
    println!("{:<18} {:>10.2}", "out of FOV (%)", metrics.out_of_fov_pct);
    println!(
        "{:<18} {:>10.3} {:>10.3}",
        "deviation (rad)", metrics.deviation_mean, metrics.deviation_std
    );
    println!(
        "{:<18} {:>10.3} {:>10.3}",
        "body rate (rad/s)", metrics.z_body_rate_mean, metrics.z_body_rate_std
    );
    println!(
        "{:<18} {:>10.3} {:>10.3}",
        "distance (m)", metrics.relative_distance_mean, metrics.relative_distance_std
    );
    println!(
        "replans {} failures {} mean solve {:.2} ms",
        metrics.replan_count,
        metrics.failure_count,
        1e3 * metrics.mean_solve_time
    );
    Ok(0)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::command()
        .after_help(schema_help())
        .try_get_matches_from(&args)
    {
        Ok(matches) => match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
            Ok(cli) => cli,
            Err(e) => {
                let _ = e.print();
                return ExitCode::from(1);
            }
        },
        Err(e) => {
            // clap handles --help/--version with success exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let result = match &cli.command {
        Command::Plan { config, out } => cmd_plan(config, out, &overrides),
        Command::Bench {
            n,
            seed,
            methods,
            out,
            config,
        } => cmd_bench(*n, *seed, methods, out, config.as_deref(), &overrides),
        Command::Track { config, out } => cmd_track(config, out, &overrides),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(1)
        }
    }
}
