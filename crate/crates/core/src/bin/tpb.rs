use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use tpb::experiment::{
    build_bank_stage, evaluate_stage, export_embeddings_stage, fine_tune_stage, generate_data_stage, meta_train_stage,
    pretrain_stage, record_path, run_experiment, summary_text, sweep_k, ExperimentConfig,
};
use tpb::{Result, TpbError};

#[derive(Debug, Parser)]
#[command(
    name = "tpb",
    version,
    about = "Cross-city few-shot traffic forecasting with a traffic pattern bank"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; every section is optional.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override every training seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Keep wall-clock timings out of reports so reruns match byte for byte.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Corpus directory used when the configuration names none.
    #[arg(long, global = true, env = "TPB_DATA_DIR", value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured synthetic corpus to a directory.
    GenerateData,
    /// Masked-patch pre-training of the encoder.
    Pretrain,
    /// Embed the source corpus and cluster it into a pattern bank.
    BuildBank,
    /// Reptile meta-training over the source cities.
    MetaTrain,
    /// Few-shot fine-tuning on the target city.
    FineTune,
    /// Test-span metrics of a fine-tuned model.
    Evaluate,
    /// Silhouette and test RMSE over a grid of bank sizes.
    SweepK,
    /// Every stage of the plan for all variants and seeds.
    Run,
    /// Patch embeddings and bank labels for external visualization.
    ExportEmbeddings,
}

impl Command {
    fn default_out(&self) -> &'static str {
        match self {
            Command::GenerateData => "data",
            Command::Pretrain => "encoder.ckpt",
            Command::BuildBank => "bank.tpb",
            Command::MetaTrain => "meta.model",
            Command::FineTune => "finetuned.model",
            Command::Evaluate => "eval",
            Command::SweepK => "sweep",
            Command::Run => "run",
            Command::ExportEmbeddings => "embeddings.tpb",
        }
    }
}

fn load_config(common: &Common, command: &Command) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
        if matches!(command, Command::GenerateData) {
            cfg.data.synth.seed = seed;
        }
    }
    if cfg.data.dir.is_none() && !matches!(command, Command::GenerateData) {
        cfg.data.dir = common.data_dir.clone();
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = load_config(common, &cli.command)?;
    let out: PathBuf = match (&common.out, &cli.command) {
        (Some(p), _) => p.clone(),
        (None, Command::GenerateData) => common.data_dir.clone().unwrap_or_else(|| PathBuf::from("data")),
        (None, c) => PathBuf::from(c.default_out()),
    };
    let show = |p: &Path| p.display().to_string();
    match cli.command {
        Command::GenerateData => {
            let hash = generate_data_stage(&cfg, &out)?;
            println!("corpus written to {} (sha256 {hash})", show(&out));
        }
        Command::Pretrain => {
            let r = pretrain_stage(&cfg, &out)?;
            println!(
                "encoder written to {}: best epoch {}, validation masked MSE {:.5}",
                show(&out),
                r.best_epoch,
                r.best_val_mse
            );
        }
        Command::BuildBank => {
            let r = build_bank_stage(&cfg, &out)?;
            println!(
                "bank written to {}: K = {}, silhouette {:?}",
                show(&out),
                r.k,
                r.silhouette
            );
        }
        Command::MetaTrain => {
            let r = meta_train_stage(&cfg, &out)?;
            let last = r.history.last().map(|h| h.query_loss);
            println!(
                "{} model written to {}: final query loss {last:?}",
                r.variant,
                show(&out)
            );
        }
        Command::FineTune => {
            let r = fine_tune_stage(&cfg, &out)?;
            println!(
                "{} model written to {}: final training loss {:?}",
                r.variant,
                show(&out),
                r.epoch_loss.last()
            );
        }
        Command::Evaluate => {
            let r = evaluate_stage(&cfg, &out, common.deterministic)?;
            print!("{}", summary_text(std::slice::from_ref(&r)));
        }
        Command::SweepK => {
            println!("k,silhouette,rmse_mean,rmse_std");
            for row in sweep_k(&cfg, &out)? {
                let sil = row.silhouette.map(|s| format!("{s:.6}")).unwrap_or_default();
                println!("{},{sil},{:.6},{:.6}", row.k, row.rmse.mean, row.rmse.std);
            }
        }
        Command::Run => {
            let r = run_experiment(&cfg, &out, common.deterministic)?;
            print!("{}", summary_text(&r.reports));
            info!("{} artifacts under {}", r.artifacts.len(), show(&out));
        }
        Command::ExportEmbeddings => {
            let e = export_embeddings_stage(&cfg, &out)?;
            println!("{} embeddings written to {}", e.embeddings.nrows(), show(&out));
        }
    }
    if matches!(
        cli.command,
        Command::Pretrain | Command::BuildBank | Command::MetaTrain | Command::FineTune
    ) {
        info!("record written to {}", show(&record_path(&out)));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code(&e))
        }
    }
}

fn code(e: &TpbError) -> u8 {
    u8::try_from(e.exit_code()).unwrap_or(1)
}
