//! `ode`: data generation, training, evaluation, inference, gradient checks,
//! benchmarks and offset inspection.
//!
//! Exit codes: 0 success, 2 usage or config, 3 I/O, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ode_depth::bench::{self, CountingAlloc};
use ode_depth::checkpoint::Checkpoint;
use ode_depth::config::{RunConfig, Section};
use ode_depth::data::{colorize, make_dataset, read_pfm, read_ppm, write_pfm, write_ppm, DatasetManifest, Split};
use ode_depth::gradcheck::{self, GradcheckConfig};
use ode_depth::infer::{evaluate_checkpoint, predict};
use ode_depth::metrics::CSV_HEADER;
use ode_depth::net::Stage;
use ode_depth::train::{self, LOG_HEADER};
use ode_depth::{Error, Result};

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser)]
#[command(name = "ode", version, about = "Omnidirectional depth extension toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic panorama dataset with a manifest.
    GenData(GenData),
    /// Train a network and keep the best checkpoint by validation Abs Rel.
    Train(TrainArgs),
    /// Print the metrics of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Predict the full depth panorama and write a color preview.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sensor: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the output path with a `.ppm` extension.
        #[arg(long)]
        preview: Option<PathBuf>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        target: String,
    },
    /// Time and measure `im2col` against `deform_im2col`.
    Bench {
        #[arg(long, default_value_t = 64)]
        h: usize,
        #[arg(long, default_value_t = 128)]
        w: usize,
        #[arg(long, default_value_t = 32)]
        c: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        /// Also sweep sizes and fit extra memory against h·w·k².
        #[arg(long)]
        sweep: bool,
    },
    /// Print the sampling locations used at one pixel.
    InspectOffsets {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        sensor: PathBuf,
        /// Row and column, `I,J`.
        #[arg(long)]
        pixel: String,
        #[arg(long, default_value = "sftl")]
        stage: String,
    },
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cfg: Option<PathBuf>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    h: Option<String>,
    #[arg(long)]
    w: Option<String>,
    #[arg(long)]
    hfov: Option<String>,
    #[arg(long)]
    vfov: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cfg: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// planar | igt | digt
    #[arg(long)]
    sftl: Option<String>,
    /// off | cspn | ig | d
    #[arg(long)]
    cspn: Option<String>,
    /// front | none
    #[arg(long)]
    pd: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Continue from a `<out>.last` checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn apply(cfg: &mut RunConfig, section: Section, flags: &[(&str, &Option<String>)]) -> Result<()> {
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(section, key, v)?;
        }
    }
    Ok(())
}

fn log_config(cfg: &RunConfig) {
    for line in cfg.to_text().lines() {
        eprintln!("# {line}");
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = load_config(a.cfg.as_deref())?;
    let flags = [("n", &a.n), ("h", &a.h), ("w", &a.w), ("hfov", &a.hfov), ("vfov", &a.vfov), ("seed", &a.seed)];
    apply(&mut cfg, Section::Data, &flags)?;
    log_config(&cfg);
    let d = &cfg.data;
    let m = make_dataset(d.n, d.grid()?, d.fov()?, &a.out, d.seed)?;
    println!(
        "wrote {} samples ({} train, {} val) to {}",
        m.entries.len(),
        m.count(Split::Train),
        m.count(Split::Val),
        a.out.display()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.cfg.as_deref())?;
    apply(&mut cfg, Section::Net, &[("sftl", &a.sftl), ("cspn", &a.cspn), ("pd", &a.pd)])?;
    apply(&mut cfg, Section::Train, &[("epochs", &a.epochs), ("seed", &a.seed)])?;
    let manifest = DatasetManifest::read(&a.data)?;
    for (key, dim) in [("h", manifest.h), ("w", manifest.w)] {
        if !cfg.is_set(Section::Net, key) {
            cfg.set(Section::Net, key, &dim.to_string())?;
        }
    }
    cfg.validate()?;
    log_config(&cfg);
    println!("{LOG_HEADER}");
    let summary = train::train(&manifest, &cfg.net, &cfg.train, &a.out, a.resume.as_deref(), &mut |row| {
        println!("{row}")
    })?;
    match summary.best_epoch {
        Some(e) => eprintln!("best val abs_rel {} at epoch {e}, saved {}", summary.best_abs_rel, a.out.display()),
        None => eprintln!("no improvement over abs_rel {}", summary.best_abs_rel),
    }
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: &str) -> Result<()> {
    let split: Split = split.parse()?;
    let ck = Checkpoint::load(ckpt)?;
    let manifest = DatasetManifest::read(data)?;
    let m = evaluate_checkpoint(&ck, &manifest, split)?;
    println!("{CSV_HEADER}\n{}\n\n{m}", m.csv_row());
    Ok(())
}

fn read_inputs(image: &Path, sensor: &Path) -> Result<(ode_depth::Tensor<f64>, ode_depth::Tensor<f64>)> {
    Ok((read_ppm(image)?, read_pfm(sensor)?))
}

fn infer(ckpt: &Path, image: &Path, sensor: &Path, out: &Path, preview: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let (img, dp) = read_inputs(image, sensor)?;
    let p = predict(&ck, &img, Some(&dp), None)?;
    if !p.sensor_used {
        eprintln!("note: the network takes no sensor input; {} was ignored", sensor.display());
    }
    write_pfm(out, &p.depth)?;
    let (lo, hi) = p.depth.min_max();
    let preview = preview.unwrap_or_else(|| out.with_extension("ppm"));
    write_ppm(&preview, &colorize(&p.depth, lo, hi)?)?;
    eprintln!("depth {lo:.3}..{hi:.3} m, wrote {} and {}", out.display(), preview.display());
    Ok(())
}

fn parse_pixel(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("pixel must be 'I,J', got '{s}'"));
    let (i, j) = s.split_once(',').ok_or_else(bad)?;
    Ok((i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?))
}

fn inspect(ckpt: &Path, image: &Path, sensor: &Path, pixel: &str, stage: &str) -> Result<()> {
    let (i, j) = parse_pixel(pixel)?;
    let stage: Stage = stage.parse()?;
    let ck = Checkpoint::load(ckpt)?;
    let (img, dp) = read_inputs(image, sensor)?;
    let p = predict(&ck, &img, Some(&dp), Some((stage, i, j)))?;
    let r = p.inspection.expect("inspection requested");
    eprintln!("# {stage} grid {}x{}, pixel {},{}", r.grid.0, r.grid.1, r.pixel.0, r.pixel.1);
    println!("tap,tangent_x,tangent_y,delta_0,delta_1,row,col");
    for (t, tap) in r.taps.iter().enumerate() {
        println!(
            "{t},{},{},{},{},{},{}",
            tap.tangent.x, tap.tangent.y, tap.delta.0, tap.delta.1, tap.coord.0, tap.coord.1
        );
    }
    Ok(())
}

fn run_gradcheck(target: &str) -> Result<()> {
    let reports = gradcheck::run(target, GradcheckConfig::default())?;
    for r in &reports {
        print!("{r}");
    }
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed()).map(|r| r.target.as_str()).collect();
    println!("{} targets, {} failed", reports.len(), failed.len());
    if !failed.is_empty() {
        return Err(Error::Gradcheck(format!("failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn run_bench(h: usize, w: usize, c: usize, k: usize, iters: usize, sweep: bool) -> Result<()> {
    println!("{}", bench::CSV_HEADER);
    for row in bench::bench_sampling(h, w, c, k, iters)? {
        println!("{row}");
    }
    if sweep {
        let (rows, fit) = bench::sweep(&[16, 32, 48, 64], &[3, 5], c, iters)?;
        for row in rows {
            println!("{row}");
        }
        eprintln!("deform extra bytes = {:.3}·hwk² + {:.0}, R² = {:.5}", fit.slope, fit.intercept, fit.r2);
    }
    Ok(())
}

fn set_threads() -> Result<()> {
    let Ok(v) = std::env::var("ODE_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("ODE_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    set_threads()?;
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => train_cmd(a),
        Cmd::Eval { ckpt, data, split } => eval(&ckpt, &data, &split),
        Cmd::Infer { ckpt, image, sensor, out, preview } => infer(&ckpt, &image, &sensor, &out, preview),
        Cmd::Gradcheck { target } => run_gradcheck(&target),
        Cmd::Bench { h, w, c, k, iters, sweep } => run_bench(h, w, c, k, iters, sweep),
        Cmd::InspectOffsets { ckpt, image, sensor, pixel, stage } => inspect(&ckpt, &image, &sensor, &pixel, &stage),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
