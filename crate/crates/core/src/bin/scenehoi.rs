use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use scenehoi::cli::{self, Overrides, RunConfig};
use scenehoi::model::Ablation;
use scenehoi::relnet::{ClassifierInit, VlMode};

#[derive(Parser)]
#[command(name = "scenehoi", version, about = "Scene graph and human-object interaction detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    stage1_epochs: Option<usize>,
    #[arg(long, global = true)]
    stage2_epochs: Option<usize>,
    /// Named ablation preset.
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(Ablation::VARIANTS))]
    variant: Option<String>,
    #[arg(long, global = true)]
    no_hss: bool,
    #[arg(long, global = true)]
    hss_discrete: bool,
    #[arg(long, global = true)]
    hss_wordvec: bool,
    #[arg(long, global = true)]
    no_vl: bool,
    #[arg(long, global = true, value_parser = ["cls", "pool"])]
    vl_mode: Option<String>,
    #[arg(long, global = true)]
    no_fetr: bool,
    #[arg(long, global = true)]
    no_qutr: bool,
    #[arg(long, global = true)]
    no_r2itr: bool,
    #[arg(long, global = true)]
    relq: bool,
    #[arg(long, global = true, value_parser = ["random", "teacher"])]
    classifier_init: Option<String>,
    /// Train only the interaction branch on a frozen scene-graph path.
    #[arg(long, global = true)]
    hoi_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, val and test annotation files.
    Gen,
    /// Train and write checkpoints, a loss log and stage reports.
    Train {
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score the test split and write a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prediction records to score instead of a model.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Print top-k prediction records for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0)]
        image_id: u64,
        #[arg(long)]
        top_k: Option<usize>,
    },
}

fn overrides(c: &Common) -> scenehoi::Result<Overrides> {
    Ok(Overrides {
        seed: c.seed,
        output_dir: c.output_dir.clone(),
        learning_rate: c.lr,
        stage1_epochs: c.stage1_epochs,
        stage2_epochs: c.stage2_epochs,
        variant: c.variant.clone(),
        no_hss: c.no_hss,
        hss_discrete: c.hss_discrete,
        hss_wordvec: c.hss_wordvec,
        no_vl: c.no_vl,
        vl_mode: c.vl_mode.as_deref().map(str::parse::<VlMode>).transpose()?,
        no_fetr: c.no_fetr,
        no_qutr: c.no_qutr,
        no_r2itr: c.no_r2itr,
        relq: c.relq,
        classifier_init: c.classifier_init.as_deref().map(str::parse::<ClassifierInit>).transpose()?,
        hoi_only: c.hoi_only,
    })
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(cli: Cli) -> scenehoi::Result<()> {
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides(&cli.common)?)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    match cli.command {
        Command::Gen => {
            let summary = cli::cmd_gen(&cfg)?;
            emit(&(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"));
        }
        Command::Train { resume } => {
            let s = cli::cmd_train(&cfg, resume)?;
            emit(&format!("trained {} steps, checkpoint {}\n", s.steps, s.checkpoint.display()));
            for r in &s.reports {
                emit(&format!("report {}\n", r.display()));
            }
        }
        Command::Eval { checkpoint, records } => {
            let checkpoint = checkpoint.or_else(|| Some(cfg.output_dir.join(cli::commands::LATEST_CHECKPOINT)));
            let report = cli::cmd_eval(&cfg, checkpoint.as_deref(), records.as_deref())?;
            emit(&report.to_json());
        }
        Command::Predict { checkpoint, image, image_id, top_k } => {
            let k = top_k.unwrap_or(cfg.eval.top_k);
            emit(&cli::cmd_predict(&cfg, &checkpoint, &image, image_id, k)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
