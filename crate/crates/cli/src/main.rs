use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use profproj_cli::config::EXAMPLE_CONFIG;
use profproj_cli::{execute, Command, Overrides, PipelineConfig};
use profproj_core::lgcm::SpecLabel;
use profproj_core::panel::{Domain, Group};

/// Bayesian growth curves, model averaging and projection of
/// minimum-proficiency shares.
#[derive(Parser)]
#[command(name = "profproj", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Validate the outcome and indicator files and write an ingestion report.
    Ingest(Common),
    /// Build difference variables and fill missing cells by predictive mean matching.
    Impute(Common),
    /// Fit the unconditional growth models.
    FitGrowth(Common),
    /// PSIS-LOO model comparison and divergence of predicted growth rates.
    Score(Common),
    /// Model averaging over predictors of the growth rate.
    Bma(Common),
    /// Project trajectories to future cycles.
    Project(Common),
    /// Full pipeline: impute, fit, score, average, project.
    Run(Common),
    /// Prior-sensitivity grid over parameter and model-space priors.
    Sensitivity(Common),
    /// Print an annotated example configuration.
    ExampleConfig,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    group: Option<Group>,
    #[arg(long)]
    domain: Option<Domain>,
    /// Growth model used for projection (and the only one fitted by fit-growth).
    #[arg(long)]
    model: Option<SpecLabel>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Sub::Ingest(c) => (Command::Ingest, c),
        Sub::Impute(c) => (Command::Impute, c),
        Sub::FitGrowth(c) => (Command::FitGrowth, c),
        Sub::Score(c) => (Command::Score, c),
        Sub::Bma(c) => (Command::Bma, c),
        Sub::Project(c) => (Command::Project, c),
        Sub::Run(c) => (Command::Run, c),
        Sub::Sensitivity(c) => (Command::Sensitivity, c),
        Sub::ExampleConfig => {
            print!("{EXAMPLE_CONFIG}");
            return ExitCode::SUCCESS;
        }
    };
    let result = PipelineConfig::load(&common.config).and_then(|mut cfg| {
        cfg.apply(&Overrides {
            seed: common.seed,
            out: common.out,
            group: common.group,
            domain: common.domain,
            model: common.model,
        });
        if let (Command::FitGrowth, Some(m)) = (cmd, common.model) {
            cfg.run.models = vec![m];
        }
        execute(cmd, &cfg)
    });
    match result {
        Ok(report) => {
            for a in &report.manifest.artifacts {
                println!("{}", report.out_dir.join(&a.path).display());
            }
            println!("{}", report.out_dir.join(profproj_cli::pipeline::MANIFEST).display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
