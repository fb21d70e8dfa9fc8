use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mmet_core::pipeline::{exit_code, Run, RunConfig, FINETUNE_CHECKPOINT, PRETRAIN_CHECKPOINT};
use mmet_core::{Error, Result};

/// Relative output directories are resolved against this variable when set.
const OUT_ROOT_ENV: &str = "MMET_OUT_ROOT";

#[derive(Parser)]
#[command(name = "mmet", version, about = "Masked multimodal pretraining and re-identification on synthetic pedestrians")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run config; omitted fields keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Seed for synthesis and training (overrides every `seed` field).
    #[arg(long)]
    seed: Option<u64>,
    /// Any config field, e.g. `--set finetune.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Random,
    Region,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the target corpus (data/) and the pretraining corpus (pretrain_data/).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Masked pretraining on the pretraining corpus.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Stop after this many steps; the checkpoint can be resumed later.
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, value_enum)]
        mask_strategy: Option<Strategy>,
    },
    /// Supervised finetuning on the training identities.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Evaluate retrieval on the held-out identities afterwards.
        #[arg(long)]
        eval_after: bool,
    },
    /// Retrieval mAP/CMC of a checkpoint on the held-out identities.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Grad-CAM heatmaps for the given sample indices.
    Gradcam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        ids: Vec<usize>,
        /// Target class; defaults to the ground truth, or the prediction for unseen identities.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Baseline vs random-mask vs region-mask pretraining, each finetuned and evaluated.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        pretrain_data: Option<PathBuf>,
    },
}

fn resolve(common: &Common, extra: &[(String, String)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set {item}: expected PATH=VALUE")))?;
        overrides.push((k.to_string(), v.to_string()));
    }
    if let Some(seed) = common.seed {
        for field in ["synth.seed", "pretrain.seed", "finetune.seed"] {
            overrides.push((field.to_string(), seed.to_string()));
        }
    }
    overrides.extend_from_slice(extra);
    let mut cfg = RunConfig::resolve(common.config.as_deref(), &overrides)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if cfg.out_dir.is_relative() {
        if let Some(root) = std::env::var_os(OUT_ROOT_ENV) {
            cfg.out_dir = Path::new(&root).join(&cfg.out_dir);
        }
    }
    Ok(cfg)
}

fn steps(section: &str, n: Option<usize>) -> Vec<(String, String)> {
    n.map(|n| vec![(format!("{section}.total_steps"), n.to_string())])
        .unwrap_or_default()
}

fn or_default(given: &Option<PathBuf>, fallback: PathBuf) -> PathBuf {
    given.clone().unwrap_or(fallback)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let r = Run::start(resolve(&common, &[])?, "synth")?;
            let (target, source) = r.synth()?;
            println!(
                "wrote {target} target samples to {} and {source} pretraining samples to {}",
                r.default_data_dir().display(),
                r.default_pretrain_data_dir().display()
            );
        }
        Command::Pretrain {
            common,
            data,
            resume,
            steps: n,
            stop_after,
            mask_strategy,
        } => {
            let mut extra = steps("pretrain", n);
            if let Some(s) = mask_strategy {
                let name = match s {
                    Strategy::Random => "random",
                    Strategy::Region => "region",
                };
                extra.push(("pretrain.mask_strategy".into(), name.into()));
            }
            let r = Run::start(resolve(&common, &extra)?, "pretrain")?;
            let state = r.pretrain(&or_default(&data, r.default_pretrain_data_dir()), resume.as_deref(), stop_after, "")?;
            report("pretrain", &state);
            println!("checkpoint {}", r.path(PRETRAIN_CHECKPOINT).display());
        }
        Command::Finetune {
            common,
            data,
            init,
            steps: n,
            eval_after,
        } => {
            let r = Run::start(resolve(&common, &steps("finetune", n))?, "finetune")?;
            let out = r.finetune(&or_default(&data, r.default_data_dir()), init.as_deref(), eval_after, "")?;
            report("finetune", &out.state);
            if let Some(e) = out.eval {
                println!("mAP {:.4} rank-1 {:.4} rank-5 {:.4}", e.map, e.rank(1), e.rank(5));
            }
            println!("checkpoint {}", r.path(FINETUNE_CHECKPOINT).display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
        } => {
            let r = Run::start(resolve(&common, &[])?, "eval")?;
            let ckpt = or_default(&checkpoint, r.path(FINETUNE_CHECKPOINT));
            let e = r.eval(&ckpt, &or_default(&data, r.default_data_dir()))?;
            println!(
                "mAP {:.4} rank-1 {:.4} rank-5 {:.4} over {} queries",
                e.map,
                e.rank(1),
                e.rank(5),
                e.valid_queries
            );
        }
        Command::Gradcam {
            common,
            checkpoint,
            data,
            ids,
            class,
        } => {
            let r = Run::start(resolve(&common, &[])?, "gradcam")?;
            let ckpt = or_default(&checkpoint, r.path(FINETUNE_CHECKPOINT));
            let files = r.gradcam(&ckpt, &or_default(&data, r.default_data_dir()), &ids, class)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Ablate {
            common,
            data,
            pretrain_data,
        } => {
            let r = Run::start(resolve(&common, &[])?, "ablate")?;
            let rows = r.ablate(
                &or_default(&data, r.default_data_dir()),
                &or_default(&pretrain_data, r.default_pretrain_data_dir()),
            )?;
            for row in rows {
                println!("{:<12} mAP {:.4} rank-1 {:.4}", row.variant, row.map, row.rank1);
            }
        }
    }
    Ok(())
}

fn report(what: &str, state: &mmet_core::training::TrainState) {
    if let Some(last) = state.history.last() {
        let parts: Vec<String> = last
            .report
            .components
            .iter()
            .map(|(k, v)| format!("{k} {v:.4}"))
            .collect();
        println!("{what} step {}: total {:.4} ({})", last.step, last.report.total, parts.join(", "));
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
