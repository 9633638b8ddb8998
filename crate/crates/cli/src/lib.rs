//! `decsc` batch front end. Every subcommand reads and writes files only;
//! failures print one `error[<kind>]: <message>` line on stderr and return a
//! nonzero exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use decsc::config::ExperimentConfig;
use decsc::experiments::{ablation_csv, ablation_sweep};
use decsc::io::{atomic_write, csv_to_cube, cube_to_csv, load_checkpoint, load_cube, save_checkpoint, save_cube, Checkpoint};
use decsc::layers::{DeqState, ModelParams};
use decsc::metrics::MetricReport;
use decsc::noise::{NoisePattern, NoiseSpec, CORR_BETA, CORR_ETA};
use decsc::phantom::{grad_check, grad_check_csv, GradCheckRow};
use decsc::pipeline::denoise;
use decsc::solver::{SolveTrace, SolverConfig, SolverMethod};
use decsc::synth::{synthetic_cube, toy_suite};
use decsc::tensor::{Flat, HsiCube};
use decsc::train::{train_from, AdamState};
use decsc::DecscError;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl From<DecscError> for CliError {
    fn from(e: DecscError) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "decsc", about = "Deep equilibrium convolutional sparse coding for HSI denoising")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Degrade a clean cube with a seeded noise pattern.
    AddNoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "noniid")]
        pattern: String,
        #[arg(long, default_value_t = 0.0)]
        lo: f64,
        #[arg(long, default_value_t = 55.0)]
        hi: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = CORR_BETA)]
        beta: f64,
        #[arg(long, default_value_t = CORR_ETA)]
        eta: f64,
        /// Degradation CSV; defaults to `<out>.degradation.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write smooth random clean cubes `cube_0000.hsic`, ...
    MakeSynthetic {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the cubes in a directory.
    Train {
        /// Either `clean/` and `noisy/` subdirectories with matching file
        /// names, or clean cubes only (noise drawn from the `noise.*` keys).
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: PathBuf,
        /// Step log; defaults to `<out-checkpoint>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        val_dir: Option<PathBuf>,
        /// Continue from this checkpoint's parameters and Adam state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Equilibrium solve and reconstruction.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace_csv: Option<PathBuf>,
        /// Clean cube for the per-iteration PSNR column of the trace.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// `solver.*` overrides.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// PSNR / SSIM / SAM of a prediction against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out_csv: PathBuf,
    },
    /// Phantom gradient versus central finite differences on tiny models.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        /// Number of random models, seeded `gradcheck.seed + k`.
        #[arg(long, default_value_t = 1)]
        models: u64,
    },
    /// Per-iteration residual (and PSNR) traces of one or more solvers.
    SolveTrace {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "naive,anderson")]
        method: Vec<String>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
    },
    /// Train and score the toy suite over a grid of atom counts and unroll lengths.
    Ablation {
        #[arg(long)]
        out_csv: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "32,64")]
        atoms: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
        unroll: Vec<usize>,
        /// Overrides `train.max_steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Cube file to long-format `band,row,col,value` CSV.
    CsvExport {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Long-format CSV back to a cube file.
    CsvImport {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let args: Vec<&str> = argv.iter().map(|s| s.as_ref()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            println!("{}", Cli::command().render_usage());
            let reason = e.to_string();
            let first = reason.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind, e.message.replace('\n', " "));
            EXIT_FAILURE
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>, base: ExperimentConfig) -> CliResult<ExperimentConfig> {
    let mut cfg = base;
    if let Some(p) = path {
        let text = fs::read_to_string(p)?;
        cfg.apply(&text)?;
    }
    Ok(cfg)
}

fn cube_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "hsic"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::new("no-data", format!("no .hsic files in {}", dir.display())));
    }
    Ok(files)
}

/// `(Y, X)` pairs from `dir`; see the `train` subcommand help.
fn load_pairs(dir: &Path, noise: &NoiseSpec) -> CliResult<Vec<(HsiCube, HsiCube)>> {
    let (clean_dir, noisy_dir) = (dir.join("clean"), dir.join("noisy"));
    if clean_dir.is_dir() && noisy_dir.is_dir() {
        let mut pairs = Vec::new();
        for c in cube_files(&clean_dir)? {
            let name = c.file_name().expect("file name");
            let n = noisy_dir.join(name);
            pairs.push((load_cube(&n)?, load_cube(&c)?));
        }
        return Ok(pairs);
    }
    let mut pairs = Vec::new();
    for (i, c) in cube_files(dir)?.iter().enumerate() {
        let x = load_cube(c)?;
        let spec = NoiseSpec {
            seed: noise.seed.wrapping_add(i as u64),
            ..noise.clone()
        };
        pairs.push((spec.apply(&x)?.0, x));
    }
    Ok(pairs)
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::AddNoise {
            input,
            out,
            pattern,
            lo,
            hi,
            seed,
            beta,
            eta,
            report,
        } => {
            let x = load_cube(&input)?;
            let spec = NoiseSpec {
                pattern: pattern.parse::<NoisePattern>()?,
                lo,
                hi,
                beta,
                eta,
                seed,
            };
            let (y, rep) = spec.apply(&x)?;
            save_cube(&out, &y)?;
            let report = report.unwrap_or_else(|| with_suffix(&out, ".degradation.csv"));
            atomic_write(&report, rep.to_csv().as_bytes())?;
        }
        Command::MakeSynthetic {
            out_dir,
            count,
            h,
            w,
            b,
            seed,
        } => {
            fs::create_dir_all(&out_dir)?;
            for i in 0..count {
                let x = synthetic_cube(h, w, b, seed, i as u64)?;
                save_cube(&out_dir.join(format!("cube_{i:04}.hsic")), &x)?;
            }
        }
        Command::Train {
            data_dir,
            config,
            out_checkpoint,
            log,
            val_dir,
            resume,
        } => {
            let cfg = load_config(config.as_deref(), ExperimentConfig::default())?;
            let data = load_pairs(&data_dir, &cfg.noise)?;
            let val = match &val_dir {
                Some(d) => load_pairs(d, &cfg.noise)?,
                None => Vec::new(),
            };
            let (model, params, adam) = match resume {
                Some(r) => {
                    let c = load_checkpoint(&r)?;
                    let adam = c.adam.unwrap_or_else(|| AdamState::new(&c.params));
                    (c.model, c.params, adam)
                }
                None => {
                    let mut model = cfg.model.clone();
                    model.bands = data[0].1.bands();
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                    rng.set_stream(1);
                    let p = ModelParams::init(&model, &mut rng)?;
                    let a = AdamState::new(&p);
                    (model, p, a)
                }
            };
            let outcome = train_from(params, adam, &data, &val, &cfg.train)?;
            for w in &outcome.log.warnings {
                eprintln!("warning: {w}");
            }
            let log = log.unwrap_or_else(|| with_suffix(&out_checkpoint, ".log.csv"));
            atomic_write(&log, outcome.log.to_csv().as_bytes())?;
            atomic_write(&with_suffix(&log, ".epochs.csv"), outcome.log.epochs_csv().as_bytes())?;
            save_checkpoint(
                &out_checkpoint,
                &Checkpoint {
                    model,
                    params: outcome.params,
                    adam: Some(outcome.adam),
                },
            )?;
            if let Some(last) = outcome.log.steps.last() {
                println!("steps={} final_loss={:?}", outcome.log.steps.len(), last.loss);
            }
        }
        Command::Denoise {
            input,
            checkpoint,
            out,
            trace_csv,
            reference,
            config,
        } => {
            let solver = load_config(config.as_deref(), ExperimentConfig::default())?.train.solver;
            let ck = load_checkpoint(&checkpoint)?;
            let y = load_cube(&input)?;
            let x = reference.as_deref().map(load_cube).transpose()?;
            let (xhat, trace) = denoise(&ck.params, &y, &solver, x.as_ref())?;
            save_cube(&out, &xhat)?;
            if let Some(t) = trace_csv {
                atomic_write(&t, trace.to_csv().as_bytes())?;
            }
        }
        Command::Eval {
            pred,
            reference,
            out_csv,
        } => {
            let report = MetricReport::compute(&load_cube(&pred)?, &load_cube(&reference)?)?;
            atomic_write(&out_csv, report.to_csv().as_bytes())?;
            print!("{}", report.table());
        }
        Command::GradCheck {
            config,
            out_csv,
            models,
        } => {
            let cfg = load_config(config.as_deref(), ExperimentConfig::grad_check_default())?;
            let rows = grad_check_models(&cfg, models)?;
            let csv = grad_check_csv(&rows);
            match out_csv {
                Some(p) => atomic_write(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
            let worst = rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            if !(worst <= cfg.gradcheck.tol) {
                return Err(CliError::new(
                    "check-failed",
                    format!("max_rel_err {worst:e} exceeds tolerance {:e}", cfg.gradcheck.tol),
                ));
            }
        }
        Command::SolveTrace {
            input,
            checkpoint,
            method,
            reference,
            out_csv,
            max_iter,
            tol,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let y = load_cube(&input)?;
            let x = reference.as_deref().map(load_cube).transpose()?;
            let mut csv = String::from(TRACE_HEADER);
            for m in &method {
                let solver = SolverConfig {
                    method: m.parse::<SolverMethod>()?,
                    max_iter,
                    tol,
                    ..SolverConfig::default()
                };
                let trace = match denoise(&ck.params, &y, &solver, x.as_ref()) {
                    Ok((_, t)) => t,
                    Err(DecscError::Diverged { trace }) => trace,
                    Err(e) => return Err(e.into()),
                };
                push_trace_rows(&mut csv, m, &trace);
            }
            match out_csv {
                Some(p) => atomic_write(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Ablation {
            out_csv,
            config,
            atoms,
            unroll,
            steps,
        } => {
            let mut cfg = load_config(config.as_deref(), ExperimentConfig::default())?;
            if let Some(s) = steps {
                cfg.train.max_steps = s;
            }
            let (train_set, test_set) = toy_suite()?;
            let rows = ablation_sweep(&train_set, &test_set, &cfg, &atoms, &unroll)?;
            atomic_write(&out_csv, ablation_csv(&rows).as_bytes())?;
        }
        Command::CsvExport { input, out } => {
            atomic_write(&out, cube_to_csv(&load_cube(&input)?).as_bytes())?;
        }
        Command::CsvImport { input, out } => {
            let text = fs::read_to_string(&input)?;
            save_cube(&out, &csv_to_cube(&text, &input)?)?;
        }
    }
    Ok(())
}

pub const TRACE_HEADER: &str = "method,iter,residual,psnr_if_reference_given\n";

/// Appends `trace` to a comparative trace CSV, one row per iteration. A
/// diverged solve keeps the iterations it ran.
pub fn push_trace_rows(csv: &mut String, method: &str, trace: &SolveTrace) {
    for line in trace.to_csv().lines().skip(1) {
        csv.push_str(method);
        csv.push(',');
        csv.push_str(line);
        csv.push('\n');
    }
}

/// Model `k` uses seed `gradcheck.seed + k`: parameters from the configured
/// architecture, a clean cube in [0, 1], a noisy copy with ±0.1 uniform
/// perturbation, and a detached start state with entries in ±0.3.
pub fn grad_check_model(cfg: &ExperimentConfig, k: u64) -> CliResult<(ModelParams, HsiCube, HsiCube, DeqState)> {
    let g = &cfg.gradcheck;
    let mut model = cfg.model.clone();
    model.bands = g.bands;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed.wrapping_add(k));
    let p = ModelParams::init(&model, &mut rng)?;
    let n = g.height * g.width * g.bands;
    let x = HsiCube::from_vec(g.height, g.width, g.bands, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    let mut a = DeqState::zeros(&p, g.height, g.width);
    a.s.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
    a.h.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
    Ok((p, y, x, a))
}

/// Per-block rows merged over `models` random models: worst maximum and the
/// element-weighted mean.
pub fn grad_check_models(cfg: &ExperimentConfig, models: u64) -> CliResult<Vec<GradCheckRow>> {
    let mut merged: Vec<GradCheckRow> = Vec::new();
    for k in 0..models.max(1) {
        let (p, y, x, a) = grad_check_model(cfg, k)?;
        let rows = grad_check(&p, &a, &y, &x, cfg.gradcheck.unroll, cfg.gradcheck.eps)?;
        if merged.is_empty() {
            merged = rows;
            continue;
        }
        for (m, r) in merged.iter_mut().zip(rows) {
            let total = m.compared + r.compared;
            if total > 0 {
                m.mean_rel_err = (m.mean_rel_err * m.compared as f64 + r.mean_rel_err * r.compared as f64) / total as f64;
            }
            m.max_rel_err = m.max_rel_err.max(r.max_rel_err);
            m.compared = total;
        }
    }
    Ok(merged)
}
