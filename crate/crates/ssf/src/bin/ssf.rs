//! Scene-flow command-line tool. One command per process; every command
//! is deterministic given config + seed (wall-clock timings excepted).
//!
//! Exit codes: 0 success, 2 usage or input error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use ssf::config::RunConfig;
use ssf::error::IoError;
use ssf::pipeline;
use ssf::report::{report_csv, report_table};
use ssf::synth::synth_frame_pair;
use ssf::{sffp, ssfl, ssfw};
use ssf_core::CoreError;

#[derive(Parser)]
#[command(name = "ssf", about = "Sparse scene flow pipeline tool", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags that override values from the config file.
#[derive(Args)]
struct Overrides {
    /// Key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap; results are independent of this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Square grid side length in meters.
    #[arg(long, global = true)]
    grid_range: Option<f64>,
    /// Horizontal pillar size in meters.
    #[arg(long, global = true)]
    voxel_size: Option<f64>,
    /// Comma-separated interior range-bin edges in meters.
    #[arg(long, global = true)]
    bins: Option<String>,
    /// Dynamic/static speed threshold in m/s.
    #[arg(long, global = true)]
    dynamic_threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate deterministic synthetic SFFP scenes.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of frame pairs; pair k uses seed seed + k.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Run the network over one frame pair and write an SSFL flow file.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a predicted flow against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        /// Directory for the metrics CSV; stdout table is always printed.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Overfit the toy network on a directory of SFFP pairs.
    TrainToy {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_weights: PathBuf,
        /// Loss trace CSV path; defaults to the weights path with a .csv
        /// extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Measure forward-pass cost over a set of grid ranges with a fixed
    /// synthetic scene.
    Bench {
        /// Comma-separated grid ranges in meters.
        #[arg(long, default_value = "51.2,102.4,204.8,409.6")]
        ranges: String,
        /// Total synthetic point count per scan.
        #[arg(long, default_value_t = 50_000)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        /// CSV output path; defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(ov: &Overrides) -> ssf::Result<RunConfig> {
    let mut cfg = match &ov.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = ov.seed {
        cfg.apply("seed", &seed.to_string())?;
    }
    if let Some(threads) = ov.threads {
        cfg.apply("threads", &threads.to_string())?;
    }
    if let Some(range) = ov.grid_range {
        cfg.apply("grid.range_m", &range.to_string())?;
    }
    if let Some(v) = ov.voxel_size {
        cfg.apply("grid.voxel_xy_m", &v.to_string())?;
    }
    if let Some(bins) = &ov.bins {
        cfg.apply("metrics.range_edges_m", bins)?;
    }
    if let Some(t) = ov.dynamic_threshold {
        cfg.apply("metrics.dynamic_threshold_mps", &t.to_string())?;
    }
    cfg.finish()
}

fn cmd_synth(cfg: &RunConfig, out_dir: &Path, count: usize) -> ssf::Result<()> {
    fs::create_dir_all(out_dir)?;
    for k in 0..count {
        let mut scene = cfg.synth.clone();
        scene.rng_seed = cfg.seed.wrapping_add(k as u64);
        let pair = synth_frame_pair(&scene)?;
        sffp::write_frame_pair(&pair, &out_dir.join(format!("pair_{k:04}.sffp")))?;
    }
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, weights: &Path, pair: &Path, out: &Path) -> ssf::Result<()> {
    let bundle = ssfw::read_weights(weights)?;
    let pair = sffp::read_frame_pair(pair)?;
    let (flow, _) = pipeline::infer(&pair, &bundle, cfg)?;
    ssfl::write_flow(&flow, out)?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, pred: &Path, pair: &Path, out_dir: Option<&Path>) -> ssf::Result<()> {
    let pred = ssfl::read_flow(pred)?;
    let pair = sffp::read_frame_pair(pair)?;
    let report = pipeline::evaluate(&pair, &pred, cfg)?;
    print!("{}", report_table(&report));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), report_csv(&report))?;
    }
    Ok(())
}

fn cmd_train_toy(
    cfg: &RunConfig,
    data_dir: &Path,
    out_weights: &Path,
    loss_csv: Option<&Path>,
    steps: Option<usize>,
    lr: Option<f64>,
) -> ssf::Result<()> {
    let mut cfg = cfg.clone();
    if let Some(steps) = steps {
        cfg.train_steps = steps;
    }
    if let Some(lr) = lr {
        cfg.train_lr = lr;
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(data_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "sffp"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(IoError::Config(format!("no .sffp files in {}", data_dir.display())));
    }
    let pairs = paths
        .iter()
        .map(|p| sffp::read_frame_pair(p))
        .collect::<ssf::Result<Vec<_>>>()?;
    let (bundle, trace) = pipeline::train_toy(&pairs, &cfg)?;
    ssfw::write_weights(&bundle, out_weights)?;
    let csv_path = match loss_csv {
        Some(p) => p.to_path_buf(),
        None => out_weights.with_extension("csv"),
    };
    fs::write(csv_path, pipeline::loss_trace_csv(&trace))?;
    Ok(())
}

fn cmd_bench(
    cfg: &RunConfig,
    ranges: &str,
    points: usize,
    reps: usize,
    out: Option<&Path>,
) -> ssf::Result<()> {
    let ranges: Vec<f64> = ranges
        .split(',')
        .map(|r| {
            r.trim()
                .parse::<f64>()
                .map_err(|_| IoError::Config(format!("bad range {r:?}")))
        })
        .collect::<ssf::Result<Vec<_>>>()?;
    if ranges.is_empty() || reps == 0 {
        return Err(IoError::Config("need at least one range and one rep".into()));
    }

    let mut csv = String::from("range,peak_feature_rows,rulebook_pairs,wall_ms\n");
    for &range in &ranges {
        let mut run = cfg.clone();
        run.apply("grid.range_m", &range.to_string())?;
        // The scene itself never changes: fixed extent, fixed count.
        run.apply("synth.n_boxes", "8")?;
        let boxed = 8 / 2 * (60 + 25);
        run.apply(
            "synth.n_background_points",
            &points.saturating_sub(boxed).to_string(),
        )?;
        let run = run.finish()?;

        let pair = synth_frame_pair(&run.synth)?;
        let mut net = pipeline::build_network(&run)?;
        let mut best_ms = f64::INFINITY;
        let mut counters = ssf_core::spconv::Counters::default();
        for _ in 0..reps {
            let started = Instant::now();
            let out = ssf_core::network::ssf_forward(
                &pair,
                &net.params,
                &run.grid,
                &mut net.store,
                ssf_core::nn::NormMode::Eval,
            )?;
            best_ms = best_ms.min(started.elapsed().as_secs_f64() * 1e3);
            counters = out.counters;
        }
        csv.push_str(&format!(
            "{range},{},{},{:.3}\n",
            counters.peak_rows, counters.rulebook_pairs, best_ms
        ));
    }
    match out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run() -> ssf::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.overrides)?;
    match &cli.command {
        Command::Synth { out_dir, count } => cmd_synth(&cfg, out_dir, *count),
        Command::Infer { weights, pair, out } => cmd_infer(&cfg, weights, pair, out),
        Command::Eval { pred, pair, out_dir } => cmd_eval(&cfg, pred, pair, out_dir.as_deref()),
        Command::TrainToy { data_dir, out_weights, loss_csv, steps, lr } => cmd_train_toy(
            &cfg,
            data_dir,
            out_weights,
            loss_csv.as_deref(),
            *steps,
            *lr,
        ),
        Command::Bench { ranges, points, reps, out } => {
            cmd_bench(&cfg, ranges, *points, *reps, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ssf: {e}");
            match e {
                IoError::Core(CoreError::Numeric(_)) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
