use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use propaseg_core::exec;
use propaseg_core::fusion::{build_fusion, train_fusion};
use propaseg_harness::{run_decoder_ablation, run_experiment, CaseSpec, ExperimentConfig};
use propaseg_service::{install_model, ServiceConfig};

#[derive(Parser)]
#[command(name = "propaseg", version, about = "Slice-edit propagation for volumetric segmentation")]
struct Cli {
    /// Run single-threaded.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cross-validated simulated-user experiment.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Sweep the decoder level the activation is taken from.
    AblateDecoder {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        levels: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Train a backbone and fusion network on phantoms and install them for the service.
    TrainDemo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "models")]
        model_dir: PathBuf,
        #[arg(long, default_value = "demo")]
        id: String,
    },
    /// Serve the HTTP API.
    Serve {
        /// JSON service config; PROPASEG_* variables override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn experiment_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::from_json(&text)?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn simulate(config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let cfg = experiment_config(config)?;
    let outcome = run_experiment(&cfg, out)?;
    print!("{}", outcome.summary);
    println!("reports written to {}", out.display());
    let failed = outcome.failed_folds();
    if failed > 0 {
        eprintln!("{failed} of {} folds failed", cfg.folds);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn ablate(levels: Vec<usize>, config: Option<&Path>, out: &Path) -> Result<ExitCode> {
    let mut cfg = experiment_config(config)?;
    cfg.tap_levels = levels;
    cfg.validate()?;
    let outcome = run_decoder_ablation(&cfg, out)?;
    print!("{}", outcome.table);
    let failed = outcome.failed_folds();
    if failed > 0 {
        eprintln!("{failed} of {} folds failed", cfg.folds);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn train_demo(config: Option<&Path>, model_dir: &Path, id: &str) -> Result<ExitCode> {
    let cfg = experiment_config(config)?;
    let ids: Vec<usize> = (0..cfg.cases).collect();
    let clean = ids.iter().map(|&i| CaseSpec::new(&cfg, i).clean()).collect::<Result<Vec<_>, _>>()?;
    let faded = ids.iter().map(|&i| CaseSpec::new(&cfg, i).faded()).collect::<Result<Vec<_>, _>>()?;
    let mut seg = propaseg_core::backbone::build_backbone(cfg.backbone_config())?;
    let report = propaseg_core::backbone::train_backbone(&mut seg, &clean, &cfg.train_config())?;
    log::info!("backbone final loss {:?}", report.epoch_losses.last());
    let mut fusion = build_fusion(seg.tap_shape(cfg.phantom.dims)?, cfg.fusion_config())?;
    let report = train_fusion(&seg, &mut fusion, &faded, &cfg.fusion_train_config())?;
    log::info!("fusion final loss {:?}", report.epoch_losses.last());
    let root = install_model(model_dir, id, &seg, cfg.loss(), Some(&fusion))?;
    println!("installed model {id:?} in {}", root.display());
    Ok(ExitCode::SUCCESS)
}

fn serve(config: Option<&Path>) -> Result<ExitCode> {
    let cfg = ServiceConfig::from_env(config)?;
    if !cfg.model_dir.is_dir() {
        bail!("model directory {} does not exist", cfg.model_dir.display());
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(propaseg_service::serve(cfg))?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.sequential {
        exec::set_parallel(false);
    }
    let result = match cli.command {
        Command::Simulate { config, out } => simulate(config.as_deref(), &out),
        Command::AblateDecoder { levels, config, out } => ablate(levels, config.as_deref(), &out),
        Command::TrainDemo { config, model_dir, id } => train_demo(config.as_deref(), &model_dir, id.as_str()),
        Command::Serve { config } => serve(config.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
