//! Command-line pipelines: simulate, run-vins, run-fgo, evaluate, sweep.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use gatevio::eskf::UpdateReport;
use gatevio::geometry::{so3_log, Extrinsics};
use gatevio::io::{
    fmt17, load_gate_map, load_sensor_logs, load_trajectory, read_json, write_atomic, write_detection_log, write_gate_map,
    write_imu_log, write_json, write_jsonl, write_trajectory, InitialPose, IoError, RunConfig,
};
use gatevio::metrics::{harness_config, min_corner_sweep, robustness_ablation, trajectory_error, AblationVariant, TrajectoryError};
use gatevio::pipeline::{associate_frames, run_fgo, run_vins, Rig, VinsOptions};
use gatevio::sim::{simulate, Scenario};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gatevio", version, about = "Gate-relative visual-inertial estimation pipelines")]
struct Cli {
    /// Random seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration JSON.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config; defaults to the config directory, else "out").
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate sensor logs, gate map and ground truth from a scenario.
    Simulate(ScenarioArgs),
    /// Run the filter over sensor logs.
    RunVins(InputArgs),
    /// Smooth a filter trajectory.
    RunFgo {
        #[command(flatten)]
        inputs: InputArgs,
        /// Filter trajectory CSV (default: <output-dir>/vins_trajectory.csv).
        #[arg(long)]
        vins: Option<PathBuf>,
    },
    /// Compare trajectories against a reference.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        /// Trajectory to evaluate, as LABEL=PATH or PATH.
        #[arg(long = "estimate", required = true)]
        estimates: Vec<String>,
    },
    /// Minimum-corner and robust-weighting ablations on a scenario.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Minimum-corner settings.
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 4, 6])]
        values: Vec<usize>,
        /// Gross-outlier probability for the robustness runs.
        #[arg(long, default_value_t = 0.1)]
        outlier_prob: f64,
    },
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario JSON.
    #[arg(long, conflicts_with = "scenario")]
    spec: Option<PathBuf>,
    /// Built-in scenario: ellipse, lemniscate, racetrack3d or podium.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Debug, Args)]
struct InputArgs {
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    imu: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Validation(String),
    Runtime(String),
}

fn invalid(e: impl Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn runtime(e: impl Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Read failures caused by bad or missing inputs are validation errors.
fn input(e: IoError) -> CliError {
    invalid(e)
}

type CliResult<T> = Result<T, CliError>;

struct Context {
    config: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> CliResult<Self> {
        let config = match &cli.config {
            Some(p) => RunConfig::load(p).map_err(input)?,
            None => RunConfig::default(),
        };
        let seed = cli.seed.unwrap_or(config.seed);
        let out = cli
            .output_dir
            .clone()
            .or_else(|| config.output_dir.clone())
            .or_else(|| cli.config.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { config, seed, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn require(&self, flag: &Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
        let p = flag
            .clone()
            .or_else(|| cfg.clone())
            .ok_or_else(|| invalid(format!("no {what} given (use --{what} or the config)")))?;
        if !p.exists() {
            return Err(invalid(format!("{what}: {} does not exist", p.display())));
        }
        Ok(p)
    }
}

fn load_scenario(args: &ScenarioArgs) -> CliResult<Scenario> {
    let scenario = match (&args.spec, &args.scenario) {
        (Some(p), _) => read_json::<Scenario>(p).map_err(input)?,
        (None, Some(name)) => Scenario::by_name(name).ok_or_else(|| invalid(format!("unknown scenario {name:?}")))?,
        (None, None) => Scenario::ellipse(),
    };
    scenario.validate().map_err(invalid)?;
    Ok(scenario)
}

fn cmd_simulate(ctx: &Context, args: &ScenarioArgs) -> CliResult<()> {
    let scenario = load_scenario(args)?;
    let run = simulate(&scenario, ctx.seed).map_err(invalid)?;
    write_imu_log(&ctx.path("imu.jsonl"), &run.imu).map_err(runtime)?;
    write_detection_log(&ctx.path("detections.jsonl"), &run.detections).map_err(runtime)?;
    write_gate_map(&ctx.path("gate_map.json"), &run.map).map_err(runtime)?;
    write_trajectory(&ctx.path("ground_truth.csv"), &run.truth_states()).map_err(runtime)?;
    write_json(&ctx.path("scenario.json"), &scenario).map_err(runtime)?;
    let config = RunConfig {
        gate_map: Some("gate_map.json".into()),
        imu: Some("imu.jsonl".into()),
        detections: Some("detections.jsonl".into()),
        output_dir: None,
        initial_pose: Some(InitialPose::from_state(&run.truth[0].state())),
        camera: scenario.camera,
        mount: scenario.mount,
        eskf: harness_config(&scenario),
        corruption: scenario.corruption,
        seed: ctx.seed,
        ..ctx.config.clone()
    };
    write_json(&ctx.path("config.json"), &config).map_err(runtime)?;
    println!(
        "simulated {} IMU samples, {} detections, {} gates into {}",
        run.imu.len(),
        run.detections.len(),
        run.map.len(),
        ctx.out.display()
    );
    Ok(())
}

struct Inputs {
    map: gatevio::model::GateMap,
    imu: Vec<gatevio::model::ImuSample>,
    detections: Vec<gatevio::model::GateDetection>,
    ext: Extrinsics,
}

fn load_inputs(ctx: &Context, args: &InputArgs) -> CliResult<Inputs> {
    let cfg = &ctx.config;
    let map_path = ctx.require(&args.map, &cfg.gate_map, "map")?;
    let imu_path = ctx.require(&args.imu, &cfg.imu, "imu")?;
    let det_path = ctx.require(&args.detections, &cfg.detections, "detections")?;
    let map = load_gate_map(&map_path).map_err(input)?;
    let (imu, detections) = load_sensor_logs(&imu_path, &det_path).map_err(input)?;
    Ok(Inputs {
        map,
        imu,
        detections,
        ext: cfg.mount.extrinsics(),
    })
}

fn cmd_run_vins(ctx: &Context, args: &InputArgs) -> CliResult<()> {
    let inputs = load_inputs(ctx, args)?;
    let cfg = &ctx.config;
    let init = cfg
        .initial_pose
        .ok_or_else(|| invalid("config has no initial_pose"))?
        .state();
    let rig = Rig {
        map: &inputs.map,
        camera: &cfg.camera,
        ext: &inputs.ext,
    };
    let run = run_vins(
        &inputs.imu,
        &inputs.detections,
        rig,
        init,
        cfg.eskf,
        &cfg.vision,
        VinsOptions::default(),
    )
    .map_err(runtime)?;
    write_trajectory(&ctx.path("vins_trajectory.csv"), &run.trajectory).map_err(runtime)?;
    write_jsonl(&ctx.path("update_reports.jsonl"), run.reports.iter()).map_err(runtime)?;
    println!(
        "filtered {} states, {} frames, {} corner updates applied",
        run.trajectory.len(),
        run.frames.len(),
        run.reports.iter().map(UpdateReport::applied).sum::<usize>()
    );
    Ok(())
}

fn cmd_run_fgo(ctx: &Context, args: &InputArgs, vins: &Option<PathBuf>) -> CliResult<()> {
    let inputs = load_inputs(ctx, args)?;
    let cfg = &ctx.config;
    let vins_path = vins.clone().unwrap_or_else(|| ctx.path("vins_trajectory.csv"));
    let vins = load_trajectory(&vins_path).map_err(input)?;
    let rig = Rig {
        map: &inputs.map,
        camera: &cfg.camera,
        ext: &inputs.ext,
    };
    let frames: Vec<_> = associate_frames(&inputs.detections, &vins, rig, &cfg.vision)
        .into_iter()
        .map(|f| (f.t, f.measurements))
        .collect();
    let run = run_fgo(&inputs.imu, &frames, &vins, &inputs.ext, cfg.eskf.noise, &cfg.fgo).map_err(runtime)?;
    write_trajectory(&ctx.path("fgo_trajectory.csv"), &run.trajectory).map_err(runtime)?;
    write_jsonl(&ctx.path("fgo_iterations.jsonl"), run.result.log.iter()).map_err(runtime)?;
    let q = run.ext_rotation.quaternion();
    let change = so3_log(&(inputs.ext.r_bc.inverse() * run.ext_rotation));
    write_json(
        &ctx.path("extrinsics.json"),
        &json!({
            "r_bc": [q.w, q.i, q.j, q.k],
            "p_bc": [inputs.ext.p_bc.x, inputs.ext.p_bc.y, inputs.ext.p_bc.z],
            "rotation_change_deg": change.norm().to_degrees(),
        }),
    )
    .map_err(runtime)?;
    write_json(
        &ctx.path("fgo_summary.json"),
        &json!({
            "keyframes": run.keyframe_count,
            "iterations": run.result.iterations,
            "initial_cost": run.result.initial_cost,
            "final_cost": run.result.final_cost,
            "gradient_norm": run.result.gradient_norm,
            "termination": run.result.termination,
        }),
    )
    .map_err(runtime)?;
    println!(
        "smoothed {} keyframes in {} iterations ({:?}), cost {:.6e} -> {:.6e}",
        run.keyframe_count, run.result.iterations, run.result.termination, run.result.initial_cost, run.result.final_cost
    );
    Ok(())
}

fn error_series_csv(err: &TrajectoryError) -> String {
    let mut out = String::from("t,translation,rotation_deg,velocity\n");
    for s in &err.samples {
        out.push_str(&[s.t, s.translation, s.rotation_deg, s.velocity].map(fmt17).join(","));
        out.push('\n');
    }
    out
}

fn split_label(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let label = path
                .file_stem()
                .map_or_else(|| "estimate".to_string(), |s| s.to_string_lossy().into_owned());
            (label, path)
        }
    }
}

fn cmd_evaluate(ctx: &Context, reference: &Path, estimates: &[String]) -> CliResult<()> {
    let reference = load_trajectory(reference).map_err(input)?;
    let mut summary = serde_json::Map::new();
    for spec in estimates {
        let (label, path) = split_label(spec);
        let est = load_trajectory(&path).map_err(input)?;
        let err = trajectory_error(&est, &reference).map_err(invalid)?;
        write_atomic(&ctx.path(&format!("errors_{label}.csv")), error_series_csv(&err).as_bytes()).map_err(runtime)?;
        println!("{label}: e_t {:.4} m, e_r {:.4} deg, e_v {:.4} m/s", err.e_t, err.e_r, err.e_v);
        summary.insert(
            label,
            json!({ "e_t": err.e_t, "e_r": err.e_r, "e_v": err.e_v, "samples": err.samples.len() }),
        );
    }
    write_json(&ctx.path("metrics.json"), &summary).map_err(runtime)?;
    Ok(())
}

fn cmd_sweep(ctx: &Context, args: &ScenarioArgs, seeds: u64, values: &[usize], outlier_prob: f64) -> CliResult<()> {
    let scenario = load_scenario(args)?;
    if !(0.0..=1.0).contains(&outlier_prob) {
        return Err(invalid("outlier probability must lie in [0, 1]"));
    }
    if values.iter().any(|v| *v < 2) {
        return Err(invalid("minimum-corner settings must be at least 2"));
    }
    let mut outliers = scenario;
    outliers.corruption.outlier_prob = outlier_prob;
    let mut corner_rows = Vec::new();
    let mut robust_rows = Vec::new();
    let mut corner_csv = String::from("seed,setting,e_t,e_r,applied_updates\n");
    let mut robust_csv = String::from("seed,variant,e_t,e_r,diverged\n");
    for seed in ctx.seed..ctx.seed + seeds {
        for row in min_corner_sweep(&scenario, seed, values).map_err(runtime)? {
            corner_csv.push_str(&format!(
                "{seed},{},{},{},{}\n",
                row.setting,
                fmt17(row.e_t),
                fmt17(row.e_r),
                row.applied_updates
            ));
            corner_rows.push(json!({ "seed": seed, "row": row }));
        }
        for row in robustness_ablation(&outliers, seed, &AblationVariant::ALL).map_err(runtime)? {
            let variant = serde_json::to_value(row.variant).expect("variant serializes");
            robust_csv.push_str(&format!(
                "{seed},{},{},{},{}\n",
                variant.as_str().unwrap_or_default(),
                fmt17(row.e_t),
                fmt17(row.e_r),
                row.diverged
            ));
            robust_rows.push(json!({ "seed": seed, "row": row }));
        }
    }
    write_atomic(&ctx.path("min_corner_sweep.csv"), corner_csv.as_bytes()).map_err(runtime)?;
    write_atomic(&ctx.path("robustness_ablation.csv"), robust_csv.as_bytes()).map_err(runtime)?;
    write_json(
        &ctx.path("sweep.json"),
        &json!({ "min_corner": corner_rows, "robustness": robust_rows, "outlier_prob": outlier_prob }),
    )
    .map_err(runtime)?;
    print!("{corner_csv}{robust_csv}");
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(&ctx, args),
        Command::RunVins(args) => cmd_run_vins(&ctx, args),
        Command::RunFgo { inputs, vins } => cmd_run_fgo(&ctx, inputs, vins),
        Command::Evaluate { reference, estimates } => cmd_evaluate(&ctx, reference, estimates),
        Command::Sweep {
            scenario,
            seeds,
            values,
            outlier_prob,
        } => cmd_sweep(&ctx, scenario, *seeds, values, *outlier_prob),
    }
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on invalid input or usage, 2 on runtime failure.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            EXIT_RUNTIME
        }
    }
}
