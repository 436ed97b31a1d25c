use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mex3d::config::RunConfig;
use mex3d::feature::FeatureKind;
use mex3d::learn::LogisticRegression;
use mex3d::pipeline::{self, Grid, RunSummary};
use mex3d::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "mex3d", version, about = "2D+3D micro-expression recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (key=value lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory; overrides work.dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Align and crop videos, clean and register point clouds.
    Preprocess(Common),
    /// Write feature files for the preprocessed samples.
    Extract {
        #[command(flatten)]
        common: Common,
        /// 2d, 3d-si, 3d-hk or 3d-sihk; repeatable. Defaults to what eval reads.
        #[arg(long = "kind")]
        kinds: Vec<FeatureKind>,
    },
    /// Cross-validate every configured feature kind and the fusion.
    Eval(Common),
    /// Run preprocess, extract and eval over a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid file: one `key=v1 | v2 | ...` line per swept key.
        #[arg(long)]
        grid: PathBuf,
    },
    /// Write a synthetic dataset tree to --out.
    Synth(Common),
    /// Inter-coder AU agreement of a `sample,coder1,coder2` file.
    Reliability {
        file: PathBuf,
        /// Write the table here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> mex3d::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.synth.seed = s;
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(o) = &common.out {
        cfg.work_dir = o.clone();
    }
    if cfg.workers > 0 {
        // fails only if a pool already exists, which never happens here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    Ok(cfg)
}

fn report(stage: &str, s: &RunSummary) -> u8 {
    eprintln!("{stage}: {} of {} samples done", s.succeeded(), s.total);
    if s.is_partial_failure() {
        eprintln!("{stage}: {} samples failed, above the 10% limit", s.failures.len());
        EXIT_PARTIAL
    } else {
        0
    }
}

fn run(cli: Cli) -> mex3d::Result<u8> {
    match cli.command {
        Command::Preprocess(c) => {
            let cfg = load(&c)?;
            Ok(report("preprocess", &pipeline::cmd_preprocess(&cfg)?))
        }
        Command::Extract { common, kinds } => {
            let cfg = load(&common)?;
            let kinds = if kinds.is_empty() { pipeline::needed_kinds(&cfg) } else { kinds };
            Ok(report("extract", &pipeline::cmd_extract(&cfg, &kinds)?))
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let rows = pipeline::cmd_eval(&cfg)?;
            print!("{}", pipeline::format_results(&rows));
            Ok(0)
        }
        Command::Sweep { common, grid } => {
            let cfg = load(&common)?;
            let grid = Grid::load(&grid)?;
            let out = pipeline::cmd_sweep(&cfg, &grid, &LogisticRegression { config: cfg.classifier })?;
            eprintln!(
                "sweep: {} points, {} resumed, {} failed; table at {}",
                out.rows.len(),
                out.resumed,
                out.failed,
                cfg.work_dir.join("sweep.csv").display()
            );
            Ok(if out.failed > 0 { EXIT_PARTIAL } else { 0 })
        }
        Command::Synth(c) => {
            let out = c
                .out
                .clone()
                .ok_or_else(|| Error::Config("synth needs --out".into()))?;
            let cfg = load(&c)?;
            let n = pipeline::cmd_synth(&cfg.synth, &out)?;
            eprintln!("synth: wrote {n} samples to {}", out.display());
            Ok(0)
        }
        Command::Reliability { file, out } => {
            let text = std::fs::read_to_string(&file).map_err(|e| Error::Io {
                path: file.clone(),
                source: e,
            })?;
            let table = pipeline::cmd_reliability(&text, &file.display().to_string())?;
            match out {
                Some(p) => mex3d::io::write_text(&p, &table)?,
                None => print!("{table}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { EXIT_USAGE } else { EXIT_DATA })
        }
    }
}
