mod server;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use occlusplat::driver::{self, DriverError, Endpoints, PipelineConfig, RenderSource};
use occlusplat::io;
use occlusplat::trainer::Stage;

#[derive(Parser, Debug)]
#[command(name = "occlusplat", version, about = "Occlusion-aware splat scene generation")]
struct Cli {
    /// Pipeline configuration file.
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replaces every model endpoint with the in-process oracle mocks. The
    /// configuration must name a fixture scene.
    #[arg(long, global = true)]
    mock_denoisers: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the point cloud, occlusion volume, masks and initial splats.
    Init,
    /// Run one optimization stage from its latest checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Render color and depth for every pose in a pose file.
    Render {
        #[arg(long)]
        poses: PathBuf,
        /// Render the initial point cloud and masks instead of the splats.
        #[arg(long)]
        points: bool,
    },
    /// Serve the viewer API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory with viewer assets served under `/`.
        #[arg(long)]
        assets: Option<PathBuf>,
    },
    /// Write the synthetic two-room fixture (image, poses, config).
    MakeFixture {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StageArg {
    Inpaint,
    Refine,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Inpaint => Stage::Inpaint,
            StageArg::Refine => Stage::Refine,
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, DriverError> {
    let mut cfg = PipelineConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.mock_denoisers {
        cfg.denoisers = Endpoints::mocks();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<serde_json::Value, DriverError> {
    match &cli.command {
        Command::MakeFixture { dir, size } => {
            let path = driver::make_fixture(dir, *size)?;
            Ok(json!({ "config": path }))
        }
        Command::Init => {
            let s = driver::cmd_init(&load_config(&cli)?)?;
            Ok(json!({ "points": s.points, "occlusion": s.occlusion, "splats": s.splats, "views": s.views }))
        }
        Command::Train { stage } => {
            let s = driver::cmd_train(&load_config(&cli)?, (*stage).into())?;
            Ok(json!({
                "stage": s.stage.name(),
                "start_iteration": s.start_iteration,
                "iterations": s.iterations,
                "splats": s.splats,
            }))
        }
        Command::Render { poses, points } => {
            let cfg = load_config(&cli)?;
            let poses = io::read_poses(poses).map_err(|e| DriverError::Validation(e.to_string()))?;
            let source = if *points { RenderSource::Points } else { RenderSource::Splats };
            let written = driver::cmd_render(&cfg, &poses, source)?;
            Ok(json!({ "written": written }))
        }
        Command::Serve { port, host, assets } => {
            let cfg = load_config(&cli)?;
            server::serve(cfg, host, *port, assets.as_deref().map(Path::to_path_buf))?;
            Ok(json!({}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&DriverError::Validation(e.to_string().trim().to_string())),
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &DriverError) -> ExitCode {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
    ExitCode::from(e.exit_code() as u8)
}
