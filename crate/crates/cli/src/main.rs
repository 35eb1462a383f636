use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evcomplete::pipeline::{self, Models, RunConfig};
use evcomplete::Error;

#[derive(Parser)]
#[command(name = "evcomplete", version, about = "Sparse-to-dense event stream completion")]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Fast sampler steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Group neighbors with balls instead of cuboids.
    #[arg(long, global = true)]
    ball_query: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut an event file into fixed-size slices.
    Slice {
        input: PathBuf,
        /// Events per slice (defaults to n_dense).
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the coarse diffusion network.
    TrainEdn {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample and store coarse completions of the training set.
    CacheCoarse {
        data: PathBuf,
        edn: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the refinement network on a coarse cache.
    TrainErn {
        data: PathBuf,
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Complete a sparse event file.
    Complete {
        input: PathBuf,
        edn: PathBuf,
        ern: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score completions of the held-out split.
    Eval {
        data: PathBuf,
        edn: PathBuf,
        ern: PathBuf,
        /// Per-sample CSV report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render an accumulation image (PPM).
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        _ => 3,
    }
}

fn config(cli: &Cli) -> evcomplete::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(steps) = cli.steps {
        cfg.fast_steps = steps;
    }
    if cli.ball_query {
        cfg.use_ball_query = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log(line: &str) {
    println!("{line}");
}

fn run(cli: &Cli) -> evcomplete::Result<()> {
    let cfg = config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut log = log;
    match &cli.cmd {
        Command::GenData { out } => {
            fs::create_dir_all(out)?;
            let (train, test) = pipeline::generate_dataset(&cfg)?;
            let g = cfg.geometry()?;
            pipeline::write_pairs(out, "train", &train, g)?;
            pipeline::write_pairs(out, "test", &test, g)?;
            fs::write(out.join("config.cfg"), cfg.to_text())?;
            log(&format!("stage=gen-data train={} test={} out={}", train.len(), test.len(), out.display()));
        }
        Command::Slice { input, size, out } => {
            let n = pipeline::slice_file(input, out, size.unwrap_or(cfg.n_dense))?;
            log(&format!("stage=slice slices={n} out={}", out.display()));
        }
        Command::TrainEdn { data, out } => {
            let pairs = pipeline::read_pairs(data, "train")?;
            pipeline::train_edn(&pairs, &cfg, Some(out), &mut log)?;
            log(&format!("stage=edn checkpoint={}", out.display()));
        }
        Command::CacheCoarse { data, edn, out } => {
            let pairs = pipeline::read_pairs(data, "train")?;
            require(edn)?;
            let (model, params) = pipeline::load_edn(&cfg, edn)?;
            let coarse = pipeline::cache_coarse(&pairs, &model, &params, &cfg)?;
            pipeline::write_coarse_cache(out, &pairs, &coarse, cfg.geometry()?)?;
            log(&format!("stage=cache samples={} out={}", coarse.len(), out.display()));
        }
        Command::TrainErn { data, cache, out } => {
            let pairs = pipeline::read_pairs(data, "train")?;
            let coarse = pipeline::read_coarse_cache(cache, &pairs)?;
            pipeline::train_ern(&pairs, &coarse, &cfg, Some(out), &mut log)?;
            log(&format!("stage=ern checkpoint={}", out.display()));
        }
        Command::Complete { input, edn, ern, out } => {
            let models = load_models(&cfg, edn, ern)?;
            let n = pipeline::complete_file(input, out, &models, &cfg)?;
            log(&format!("stage=complete slices={n} events={} out={}", n * cfg.n_dense, out.display()));
        }
        Command::Eval { data, edn, ern, out } => {
            let pairs = pipeline::read_pairs(data, "test")?;
            let models = load_models(&cfg, edn, ern)?;
            let report = pipeline::evaluate(&pairs, &models, &cfg)?;
            if let Some(out) = out {
                fs::write(out, report.to_csv())?;
            }
            log(&format!("stage=eval ball_query={} {}", cfg.use_ball_query, report.summary()));
        }
        Command::Render { input, out } => {
            pipeline::render_file(input, out)?;
            log(&format!("stage=render out={}", out.display()));
        }
    }
    Ok(())
}

fn require(checkpoint: &Path) -> evcomplete::Result<()> {
    if checkpoint.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("checkpoint {} not found", checkpoint.display())))
    }
}

fn load_models(cfg: &RunConfig, edn: &Path, ern: &Path) -> evcomplete::Result<Models> {
    require(edn)?;
    require(ern)?;
    Models::load(cfg, edn, ern)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
