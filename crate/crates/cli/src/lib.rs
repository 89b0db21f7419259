//! `qudit-ctl`: waveform design, evaluation, benchmarking and sweeps from the
//! command line.
//!
//! Exit status is 0 on success, 1 for invalid input and 2 for numerical
//! failures. Every error is reported as one JSON line on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use qudit_control::benchmarking::{run_benchmark, DesignedMap};
use qudit_control::io::{
    read_grid, read_map_set, read_target, read_waveform, target_hash, write_benchmark_csv,
    write_grid_csv, write_json, write_target, write_waveform, DesignProvenance, DesignReportFile,
    FitReport, GridFile, RunConfig, TargetFile, WaveformFile,
};
use qudit_control::objectives::fidelity;
use qudit_control::propagation::{FieldTrajectory, Propagator};
use qudit_control::sweeps::{
    contour_area, default_field_axis, sweep_field_grid, sweep_time_grid, FieldGridSpec,
    TimeGridSpec,
};
use qudit_control::{design, ControlError, TargetMap};

#[derive(Debug, Parser)]
#[command(name = "qudit-ctl", version, about = "Qudit control waveform toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (files for `evaluate` and `contour` are only written when given).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random target drawn according to the configured task.
    SampleTarget {
        #[arg(long, default_value = "map")]
        name: String,
        /// Number of targets; more than one are named NAME-00, NAME-01, ...
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Design a waveform for a target file (or a sampled target).
    Design {
        #[arg(long, value_name = "PATH")]
        target: Option<PathBuf>,
        /// Base name of the outputs when the target is sampled.
        #[arg(long, default_value = "map")]
        name: String,
    },
    /// Fidelity of a waveform for a target under a field offset or ramp (rad/s).
    Evaluate {
        #[arg(long, value_name = "PATH")]
        waveform: PathBuf,
        #[arg(long, value_name = "PATH")]
        target: PathBuf,
        #[arg(
            long,
            default_value_t = 0.0,
            allow_negative_numbers = true,
            conflicts_with = "ramp"
        )]
        offset: f64,
        #[arg(long, num_args = 2, value_names = ["START", "END"], allow_negative_numbers = true)]
        ramp: Option<Vec<f64>>,
    },
    /// Simulated randomized benchmarking of a map set.
    Benchmark {
        /// Directory of NAME.target.json / NAME.waveform.json pairs.
        #[arg(long, value_name = "DIR")]
        maps: PathBuf,
    },
    /// Best design fidelity over the configured (T, δt) grid.
    SweepTime,
    /// Fidelity of a map set over linear field ramps.
    SweepField {
        #[arg(long, value_name = "DIR")]
        maps: PathBuf,
    },
    /// Area of the region at or above a fidelity level in a grid file.
    Contour {
        #[arg(long, value_name = "PATH")]
        grid: PathBuf,
        #[arg(long)]
        level: Option<f64>,
    },
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    explicit_out: bool,
    quiet: bool,
}

impl Context {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, file: impl AsRef<Path>) -> PathBuf {
        self.out.join(file)
    }
}

enum Failure {
    Usage(String),
    Control(ControlError),
}

impl From<ControlError> for Failure {
    fn from(e: ControlError) -> Self {
        Failure::Control(e)
    }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let line = first_line(&text);
            return report(Failure::Usage(
                line.strip_prefix("error: ").unwrap_or(line).to_string(),
            ));
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => report(f),
    }
}

fn first_line(s: &str) -> &str {
    s.lines()
        .find(|l| !l.trim().is_empty())
        .unwrap_or("")
        .trim()
}

fn report(f: Failure) -> i32 {
    let (class, kind, message, code) = match f {
        Failure::Usage(m) => ("validation", "usage", m, 1),
        Failure::Control(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            let class = if code == 1 { "validation" } else { "numerical" };
            (class, e.kind(), e.to_string(), code)
        }
    };
    eprintln!(
        "{}",
        json!({"status": "error", "class": class, "kind": kind, "message": message})
    );
    code
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let mut config = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        config.seed = s;
    }
    if let Some(w) = cli.common.workers {
        config.workers = Some(w);
    }
    config.validate()?;
    if let Some(w) = config.workers {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global();
    }
    let explicit_out = cli.common.out.is_some();
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = Context {
        config,
        out,
        explicit_out,
        quiet: cli.common.quiet,
    };
    match cli.command {
        Command::SampleTarget { name, count } => sample_target(&ctx, &name, count),
        Command::Design { target, name } => run_design(&ctx, target.as_deref(), &name),
        Command::Evaluate {
            waveform,
            target,
            offset,
            ramp,
        } => {
            let field = match ramp {
                Some(v) => FieldTrajectory::ramp(v[0], v[1]),
                None => FieldTrajectory::constant(offset),
            };
            evaluate(&ctx, &waveform, &target, field)
        }
        Command::Benchmark { maps } => benchmark(&ctx, &maps),
        Command::SweepTime => sweep_time(&ctx),
        Command::SweepField { maps } => sweep_field(&ctx, &maps),
        Command::Contour { grid, level } => contour(&ctx, &grid, level),
    }
}

fn sample_target(ctx: &Context, name: &str, count: usize) -> Result<(), Failure> {
    if count == 0 {
        return Err(ControlError::invalid("count must be positive").into());
    }
    let cfg = &ctx.config;
    for k in 0..count {
        let target = cfg.task.sample(&cfg.params, cfg.seed, k as u64)?;
        let file = TargetFile::new(
            &target,
            cfg.params.manifold,
            cfg.task.provenance(cfg.seed, k as u64),
        );
        let stem = if count == 1 {
            name.to_string()
        } else {
            format!("{name}-{k:02}")
        };
        let path = ctx.path(format!("{stem}.target.json"));
        write_target(&path, &file)?;
        println!("{}", json!({"target": path, "hash": target_hash(&target)}));
    }
    Ok(())
}

fn stem_of(path: &Path) -> String {
    let file = path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    file.strip_suffix(".target.json")
        .or_else(|| file.strip_suffix(".json"))
        .unwrap_or(&file)
        .to_string()
}

fn run_design(ctx: &Context, target_path: Option<&Path>, name: &str) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let (target, name) = match target_path {
        Some(p) => {
            let tf = read_target(p)?;
            if tf.manifold != cfg.params.manifold {
                return Err(ControlError::invalid(
                    "target manifold differs from the configured one",
                )
                .into());
            }
            (tf.target_map()?, stem_of(p))
        }
        None => {
            let t = cfg.task.sample(&cfg.params, cfg.seed, 0)?;
            let file = TargetFile::new(&t, cfg.params.manifold, cfg.task.provenance(cfg.seed, 0));
            write_target(&ctx.path(format!("{name}.target.json")), &file)?;
            (t, name.to_string())
        }
    };
    let design_config = cfg.design_config()?;
    ctx.progress(format!(
        "designing {} ({} steps, {} seeds)",
        target.kind().name(),
        design_config.n_steps()?,
        design_config.n_seeds
    ));
    let report = design(&target, &design_config)?;
    let snapshot = cfg.snapshot();
    let provenance = DesignProvenance {
        target_hash: Some(target_hash(&target)),
        seed: Some(report.best_seed),
        fidelity: Some(report.best_fidelity),
        config: Some(json!({"command": "design", "config": snapshot})),
    };
    let wf = WaveformFile::new(
        &report.best_waveform,
        &cfg.params,
        &design_config.ensemble,
        provenance,
    );
    let wpath = ctx.path(format!("{name}.waveform.json"));
    write_waveform(&wpath, &wf)?;
    let rpath = ctx.path(format!("{name}.report.json"));
    write_json(&rpath, &DesignReportFile::new(&report, &target, snapshot))?;
    println!(
        "{}",
        json!({"fidelity": report.best_fidelity, "seed": report.best_seed, "waveform": wpath, "report": rpath})
    );
    Ok(())
}

fn evaluate(
    ctx: &Context,
    waveform: &Path,
    target: &Path,
    field: FieldTrajectory,
) -> Result<(), Failure> {
    let wf = read_waveform(waveform)?;
    let tf = read_target(target)?;
    let t = tf.target_map()?;
    if wf.manifold != tf.manifold {
        return Err(ControlError::invalid("waveform and target use different manifolds").into());
    }
    field.validate()?;
    let u = Propagator::new(&wf.params)?.total(&wf.waveform()?, &field)?;
    let f = fidelity(&t, &u)?;
    let result = json!({
        "fidelity": f,
        "field": field,
        "target_hash": target_hash(&t),
        "waveform_target_hash": wf.provenance.target_hash,
    });
    println!("{}", json!({"fidelity": f}));
    if ctx.explicit_out {
        write_json(&ctx.path("evaluation.json"), &result)?;
    }
    Ok(())
}

fn load_maps(dir: &Path) -> Result<(Vec<String>, Vec<DesignedMap>), ControlError> {
    Ok(read_map_set(dir)?.into_iter().unzip())
}

fn benchmark(ctx: &Context, dir: &Path) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let (names, maps) = load_maps(dir)?;
    let maps: Vec<Arc<DesignedMap>> = maps.into_iter().map(Arc::new).collect();
    let bc = cfg.benchmark_config();
    ctx.progress(format!(
        "benchmarking {} maps at lengths {:?}, {} sequences each",
        maps.len(),
        bc.lengths,
        bc.n_per_length
    ));
    let outcome = run_benchmark(&maps, &cfg.benchmark.error_model, &bc)?;
    write_benchmark_csv(&ctx.path("dataset.csv"), &outcome.samples)?;
    let hashes: Vec<String> = maps.iter().map(|m| target_hash(&m.target)).collect();
    let report = FitReport::new(
        &outcome,
        cfg.params.dim(),
        names,
        json!({"command": "benchmark", "config": cfg.snapshot(), "target_hashes": hashes}),
    );
    write_json(&ctx.path("fit.json"), &report)?;
    println!(
        "{}",
        json!({"epsilon_0": report.epsilon_0, "epsilon_b": report.epsilon_b,
               "epsilon_s": report.epsilon_s, "epsilon_ratio": report.epsilon_ratio})
    );
    Ok(())
}

fn write_grid(ctx: &Context, file: GridFile) -> Result<(), Failure> {
    write_grid_csv(&ctx.path("grid.csv"), &file.result)?;
    write_json(&ctx.path("grid.json"), &file)?;
    Ok(())
}

fn sweep_time(ctx: &Context) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let s = &cfg.sweep;
    let targets: Vec<TargetMap> = (0..s.n_targets as u64)
        .map(|k| cfg.task.sample(&cfg.params, cfg.seed, k))
        .collect::<Result<_, _>>()?;
    let spec = TimeGridSpec {
        t_values: s.t_values.clone(),
        dt_values: s.dt_values.clone(),
        targets,
        design: cfg
            .design
            .to_config(cfg.params, cfg.ensemble.to_ensemble()?, cfg.seed),
    };
    ctx.progress(format!(
        "time sweep over {}x{} cells, {} targets",
        spec.t_values.len(),
        spec.dt_values.len(),
        spec.targets.len()
    ));
    let result = sweep_time_grid(&spec)?;
    let hashes: Vec<String> = spec.targets.iter().map(target_hash).collect();
    let provenance =
        json!({"command": "sweep-time", "config": cfg.snapshot(), "target_hashes": hashes});
    write_grid(ctx, GridFile::new(result, provenance))
}

fn sweep_field(ctx: &Context, dir: &Path) -> Result<(), Failure> {
    let cfg = &ctx.config;
    let (names, maps) = load_maps(dir)?;
    let axis = default_field_axis(cfg.ensemble.radius, cfg.sweep.field_points);
    let spec = FieldGridSpec {
        dbi_values: axis.clone(),
        dbf_values: axis,
        maps,
        params: cfg.params,
    };
    ctx.progress(format!(
        "field sweep over {0}x{0} cells, {1} waveforms",
        spec.dbi_values.len(),
        spec.maps.len()
    ));
    let result = sweep_field_grid(&spec)?;
    let hashes: Vec<String> = spec.maps.iter().map(|m| target_hash(&m.target)).collect();
    let provenance = json!({"command": "sweep-field", "config": cfg.snapshot(),
                            "maps": names, "target_hashes": hashes});
    write_grid(ctx, GridFile::new(result, provenance))
}

fn contour(ctx: &Context, grid: &Path, level: Option<f64>) -> Result<(), Failure> {
    let g = read_grid(grid)?;
    let level = level.unwrap_or(ctx.config.sweep.contour_level);
    let area = contour_area(&g.result, level)?;
    let result =
        json!({"level": level, "area": area.area, "domain": area.domain, "flag": area.flag});
    println!("{result}");
    if ctx.explicit_out {
        write_json(&ctx.path("contour.json"), &result)?;
    }
    Ok(())
}
