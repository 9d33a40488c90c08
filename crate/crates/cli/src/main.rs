//! Command-line entry point wiring configuration, data generation, both
//! training stages, evaluation and prompt export into reproducible runs.
//!
//! Exit codes: 0 success, 1 configuration/validation error, 2 runtime or
//! numeric failure. The environment variable PROMPTMD_SEED overrides the
//! configured seed.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use promptmd_core::config::RunConfig;
use promptmd_core::engine::{load_checkpoint, save_checkpoint};
use promptmd_core::error::Error;
use promptmd_core::evalkit::{build_eval_pools, export_prompts, run_protocol, Method};
use promptmd_core::mdgen::{generate_dataset, load_dataset, Dataset, Manifest};
use promptmd_core::meta::meta_train;
use promptmd_core::model::{ModelDims, SurrogateModel};
use promptmd_core::stage1::pretrain;

#[derive(Parser)]
#[command(
    name = "promptmd",
    about = "Temperature-conditioned molecular-dynamics surrogate: data generation, two-stage training, evaluation"
)]
struct Cli {
    /// Path to a JSON run configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the temperature-tagged trajectory dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// First-stage curriculum pre-training; --no-mixup trains the
    /// prompt-only baseline on the same epoch budget.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_mixup: bool,
    },
    /// Prompt meta-training from a first-stage checkpoint.
    Meta {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune-then-evaluate protocol over all three method checkpoints.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_prompt_only: PathBuf,
        #[arg(long)]
        ckpt_no_meta: PathBuf,
        #[arg(long)]
        ckpt_full: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured trial count.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Export per-temperature adapted prompt vectors with a 2-D projection.
    ExportPrompts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Ok(value) = std::env::var("PROMPTMD_SEED") {
        cfg.seed = value.parse().map_err(|_| Error::Config {
            field: "PROMPTMD_SEED".into(),
            message: format!("not a valid seed: {value}"),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Model dimensions: bead count comes from the dataset, the rest from config.
fn dims_for(cfg: &RunConfig, manifest: &Manifest) -> ModelDims {
    let mut dims = cfg.model_dims();
    dims.n_bead_types = manifest.chain.n_beads;
    dims
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved_config.json"), cfg.to_pretty_json())?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, Error> {
    load_dataset(dir)
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(cli.config.as_deref())?;
    if cli.print_config {
        println!("{}", cfg.to_pretty_json());
        return Ok(());
    }
    let command = cli.command.ok_or_else(|| Error::Config {
        field: "command".into(),
        message: "no subcommand given (see --help)".into(),
    })?;

    match command {
        Command::GenData { out } => {
            echo_config(&cfg, &out)?;
            let manifest = generate_dataset(
                &cfg.chain,
                &cfg.sim,
                &cfg.temps,
                cfg.model.d_h as u32,
                cfg.seed,
                &out,
            )?;
            println!(
                "wrote {} trajectories and {} to {}",
                manifest.entries.len(),
                promptmd_core::mdgen::MANIFEST_NAME,
                out.display()
            );
        }
        Command::Pretrain { data, out, no_mixup } => {
            echo_config(&cfg, &out)?;
            let dataset = load_data(&data)?;
            let model = SurrogateModel::new(dims_for(&cfg, &dataset.manifest));
            let log_file = fs::File::create(out.join("pretrain.log"))?;
            let mut log = BufWriter::new(log_file);
            let result = pretrain(
                &model,
                &cfg.stage1,
                &dataset,
                !no_mixup,
                cfg.seed,
                &mut log,
                Some(&out),
            )?;
            let ckpt = out.join("model.ckpt");
            save_checkpoint(&result.store, &ckpt)?;
            let mixed: usize = result.epochs.iter().map(|e| e.mixed_backbone_steps).sum();
            println!(
                "pre-training done: {} epochs, {} mixed updates, checkpoint at {}",
                result.epochs.len(),
                mixed,
                ckpt.display()
            );
        }
        Command::Meta { data, ckpt, out } => {
            echo_config(&cfg, &out)?;
            let dataset = load_data(&data)?;
            let model = SurrogateModel::new(dims_for(&cfg, &dataset.manifest));
            let stage1 = load_checkpoint(&ckpt)?;
            let log_file = fs::File::create(out.join("meta.log"))?;
            let mut log = BufWriter::new(log_file);
            let result = meta_train(&model, &cfg.meta, &stage1, &dataset, cfg.seed, &mut log)?;
            let path = out.join("meta.ckpt");
            save_checkpoint(&result.store, &path)?;
            println!(
                "meta-training done: {} epochs, checkpoint at {}",
                result.epochs.len(),
                path.display()
            );
        }
        Command::Eval {
            data,
            ckpt_prompt_only,
            ckpt_no_meta,
            ckpt_full,
            out,
            trials,
        } => {
            echo_config(&cfg, &out)?;
            let dataset = load_data(&data)?;
            let model = SurrogateModel::new(dims_for(&cfg, &dataset.manifest));
            let prompt_only = load_checkpoint(&ckpt_prompt_only)?;
            let no_meta = load_checkpoint(&ckpt_no_meta)?;
            let full = load_checkpoint(&ckpt_full)?;
            let pools = build_eval_pools(&dataset);
            let mut protocol = cfg.protocol.clone();
            if let Some(t) = trials {
                protocol.trials = t;
            }
            let checkpoints = vec![
                (Method::PromptOnly, &prompt_only),
                (Method::NoMeta, &no_meta),
                (Method::Full, &full),
            ];
            let table = run_protocol(&model, &checkpoints, &pools, &protocol, cfg.seed)?;
            fs::write(out.join("report.csv"), table.to_csv())?;
            let mut text = table.to_text();
            text.push_str(&format!("\nconfig: {}\n", serde_json_line(&cfg)));
            fs::write(out.join("report.txt"), text)?;
            println!("evaluation done: report at {}", out.join("report.csv").display());
        }
        Command::ExportPrompts { data, ckpt, out } => {
            echo_config(&cfg, &out)?;
            let dataset = load_data(&data)?;
            let model = SurrogateModel::new(dims_for(&cfg, &dataset.manifest));
            let store = load_checkpoint(&ckpt)?;
            let pools = build_eval_pools(&dataset);
            let export = export_prompts(&model, &store, &pools, &cfg.protocol, cfg.seed)?;
            fs::write(out.join("prompts.csv"), export.to_csv())?;
            fs::write(
                out.join("prompts.txt"),
                format!(
                    "rows={} variance_explained_pc1_pc2={}\nconfig: {}\n",
                    export.rows.len(),
                    export.variance_explained,
                    serde_json_line(&cfg)
                ),
            )?;
            println!(
                "prompt export done: {} rows at {}",
                export.rows.len(),
                out.join("prompts.csv").display()
            );
        }
    }
    Ok(())
}

fn serde_json_line(cfg: &RunConfig) -> String {
    cfg.to_pretty_json()
        .lines()
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(" ")
}
