use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use sscrs_core::grid::{voxelize, OccupancyGrid, VoxelGridSpec};
use sscrs_core::gradcheck::suite::{run_suite, SuiteOptions};
use sscrs_core::io::{self, check_params_match, read_checkpoint, RunConfig};
use sscrs_core::metrics::MetricsReport;
use sscrs_core::network::{init_model, param_counts, predict, ssc_rs_forward, Mode, SceneInput};
use sscrs_core::synth::generate_synthetic_scene;
use sscrs_core::tensor::{ParamRegistry, Tape};
use sscrs_core::train::{confusion, predict_samples, train_run, CONFIG_FILE};
use sscrs_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "sscrs", version, about = "Semantic scene completion from single LiDAR sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedurally generated scenes in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Voxel counts along x, y, z.
        #[arg(long, value_parser = parse_dims, default_value = "64,64,8")]
        grid: [usize; 3],
        #[arg(long, default_value_t = 0.2)]
        voxel_size: f64,
    },
    /// Train with Adam; logs and checkpoints go to --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predict a label grid for one point cloud.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write `x,y,z,class` rows for occupied voxels.
        #[arg(long)]
        export_csv: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Tiny)]
        scale: Scale,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Tiny,
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("`{p}` is not a voxel count")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected L,W,H".to_string())
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

/// Grid with x starting at the sensor plane and y, z centred.
fn synth_grid(dims: [usize; 3], s: f64) -> Result<VoxelGridSpec, Error> {
    VoxelGridSpec::new([0.0, -(dims[1] as f64) * s / 2.0, -(dims[2] as f64) * s / 2.0], s, dims)
}

fn cmd_synth(out: &Path, count: usize, seed: u64, dims: [usize; 3], voxel_size: f64) -> CmdResult {
    let spec = synth_grid(dims, voxel_size)?;
    let samples: Vec<_> = (0..count as u64)
        .map(|i| generate_synthetic_scene(seed + i, &spec))
        .collect();
    let extra = BTreeMap::from([("seed".to_string(), seed.to_string())]);
    io::write_dataset(out, &spec, &samples, &io::LabelRemap::default(), extra)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

fn cmd_train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> CmdResult {
    let cfg = RunConfig::load(config)?;
    let (manifest, samples) = io::read_dataset(data, &cfg.remap)?;
    if manifest.grid != cfg.model.grid {
        return Err(Error::Config(format!(
            "dataset grid {:?} differs from configured grid {:?}",
            manifest.grid, cfg.model.grid
        ))
        .into());
    }
    let resume = resume.map(read_checkpoint).transpose()?;
    let start = Instant::now();
    let (trainer, logs) = train_run(&cfg, &samples, out, resume)?;
    for l in &logs {
        println!("{}", l.line());
    }
    println!(
        "trained {} epochs ({} steps) in {:.1}s",
        logs.len(),
        trainer.adam.step,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Explicit config, else the one saved beside the checkpoint, else defaults.
fn model_config(ckpt: &Path, explicit: Option<&Path>) -> Result<RunConfig, Error> {
    if let Some(p) = explicit {
        return RunConfig::load(p);
    }
    let beside = ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if beside.exists() {
        RunConfig::load(beside)
    } else {
        Ok(RunConfig::default())
    }
}

fn load_params(ckpt: &Path, cfg: &RunConfig) -> Result<ParamRegistry<f32>, Error> {
    let loaded = read_checkpoint(ckpt)?.params;
    check_params_match(&init_model::<f32>(&cfg.model, 0)?, &loaded)?;
    Ok(loaded)
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, config: Option<&Path>) -> CmdResult {
    let start = Instant::now();
    let mut cfg = model_config(ckpt, config)?;
    let (manifest, samples) = io::read_dataset(data, &cfg.remap)?;
    if config.is_none() && !ckpt.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE).exists() {
        cfg.model.grid = manifest.grid.clone();
    }
    if manifest.grid != cfg.model.grid {
        return Err(Error::Config("dataset grid differs from the model grid".into()).into());
    }
    let params = load_params(ckpt, &cfg)?;
    let preds = predict_samples(&params, &cfg.model, &samples, 1)?;
    let metrics = confusion(&cfg.model, &preds, &samples)?.metrics();
    let mut report = MetricsReport::new();
    report.add_metrics(&metrics);
    report.insert("scenes", samples.len() as f64);
    let counts = param_counts(&params);
    report.insert("params.total", counts.total as f64);
    report.insert("params.semantic", counts.semantic as f64);
    report.insert("params.completion", counts.completion as f64);
    report.insert("params.bev", counts.bev as f64);
    fs::write(out, report.to_text())?;
    println!(
        "iou {:.4} miou {:.4} over {} scenes",
        metrics.iou,
        metrics.miou,
        samples.len()
    );
    eprintln!("wall time {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_infer(ckpt: &Path, points: &Path, out: &Path, csv: Option<&Path>, config: Option<&Path>) -> CmdResult {
    let cfg = model_config(ckpt, config)?;
    let params = load_params(ckpt, &cfg)?;
    let pc = io::read_points(points)?;
    let spec = &cfg.model.grid;
    let mut occ = OccupancyGrid::empty(spec.dims);
    for v in voxelize(&pc, spec).indices {
        occ.set(v.x, v.y, v.z, true);
    }
    let mut tape = Tape::inference();
    let scene = SceneInput {
        points: &pc,
        occupancy: &occ,
    };
    let fwd = ssc_rs_forward(&mut tape, &params, &cfg.model, &[scene], Mode::Infer)?;
    let pred = predict(tape.value(fwd.ssc_logits))?.remove(0);
    io::write_predictions(&pred, out, &cfg.remap)?;
    let [l, w, h] = pred.dims();
    let mut occupied = 0usize;
    let mut rows = String::from("x,y,z,class\n");
    for x in 0..l {
        for y in 0..w {
            for z in 0..h {
                let c = pred.get(x, y, z);
                if c > 0 {
                    occupied += 1;
                    rows.push_str(&format!("{x},{y},{z},{c}\n"));
                }
            }
        }
    }
    if let Some(p) = csv {
        fs::write(p, rows)?;
    }
    println!("{occupied} occupied voxels");
    Ok(())
}

fn cmd_gradcheck(inject_fault: bool) -> CmdResult {
    let start = Instant::now();
    let results = run_suite(&SuiteOptions {
        seed: 0,
        inject_fault,
    })?;
    let mut failed = 0;
    println!("{:<24} {:>12} {:>8} {:>6}  status", "op", "rel_error", "checked", "kinks");
    for r in &results {
        let ok = r.passed();
        failed += usize::from(!ok);
        println!(
            "{:<24} {:>12.3e} {:>8} {:>6}  {}",
            r.name,
            r.report.rel_error,
            r.report.checked,
            r.report.kinks,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "{} cases, {failed} failed, {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("{failed} gradient checks failed"),
        });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synth {
            out,
            count,
            seed,
            grid,
            voxel_size,
        } => cmd_synth(out, *count, *seed, *grid, *voxel_size),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(config, data, out, resume.as_deref()),
        Command::Eval {
            ckpt,
            data,
            out,
            config,
        } => cmd_eval(ckpt, data, out, config.as_deref()),
        Command::Infer {
            ckpt,
            points,
            out,
            export_csv,
            config,
        } => cmd_infer(ckpt, points, out, export_csv.as_deref(), config.as_deref()),
        Command::Gradcheck { scale: Scale::Tiny, inject_fault } => cmd_gradcheck(*inject_fault),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
