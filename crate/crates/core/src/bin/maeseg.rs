//! Command-line front end. Each stage of the workflow (generate, pretrain,
//! finetune, train-ssl, evaluate) is independently re-runnable; `pipeline`
//! chains them and `transfer` runs the cross-family comparison.
//!
//! Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration problem.
//! Every run writes a `run.json` manifest and prints artifact paths to
//! stdout as KEY=PATH lines.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maeseg::config::Config;
use maeseg::data::{Manifest, SPLIT_TEST};
use maeseg::run::{resolve_out_root, RunManifest};
use maeseg::tasks;
use maeseg::{Error, Result};

/// When set to 1, omitting the seed is an error instead of a warning.
const TEST_MODE_ENV: &str = "MAESEG_TEST_MODE";

#[derive(Parser)]
#[command(
    name = "maeseg",
    version,
    about = "Masked-autoencoder pretraining and transformer segmentation on fracture phantoms"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted sections take built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root (MAESEG_OUT overrides; default from config, then "runs").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the fully resolved config and exit without touching anything.
    #[arg(long)]
    dry_run: bool,
    /// Threads for data-parallel generation/loading. Results do not depend
    /// on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset and its manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Phantom family ("tibia-like" or "pelvis-like").
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        labeled: Option<usize>,
        #[arg(long)]
        unlabeled: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Masked-reconstruction pretraining on the unlabeled split.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised fine-tuning of the segmentation model.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretraining checkpoint for encoder init; default
        /// <root>/pretrain/mae.ckpt when present, otherwise scratch.
        #[arg(long)]
        encoder_from: Option<PathBuf>,
        /// Use only the first N labeled cases.
        #[arg(long)]
        labeled_count: Option<usize>,
    },
    /// Mean-teacher semi-supervised baseline.
    #[command(name = "train-ssl")]
    TrainSsl {
        #[command(flatten)]
        common: Common,
        /// Use only the first N labeled cases.
        #[arg(long)]
        labeled_count: Option<usize>,
    },
    /// Segmentation metrics for a checkpoint on a manifest split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Default <root>/finetune/seg.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Default <root>/<data.out_dir>/manifest.json.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// generate -> pretrain -> finetune -> evaluate.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on family A, fine-tune and baselines on family B.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Config for family B; default is family A's config with
        /// family = "pelvis-like".
        #[arg(long)]
        config_b: Option<PathBuf>,
        /// Labeled-count sweep on family B.
        #[arg(long, default_value = "20", value_delimiter = ',')]
        labeled_counts: Vec<usize>,
    },
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Generate { common, .. }
            | Cmd::Pretrain { common }
            | Cmd::Finetune { common, .. }
            | Cmd::TrainSsl { common, .. }
            | Cmd::Evaluate { common, .. }
            | Cmd::Pipeline { common }
            | Cmd::Transfer { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Config + seed + output root shared by every subcommand. The resolved
/// seed is materialized back into the config so the run manifest's
/// resolvedConfig reproduces the run on its own.
struct Setup {
    cfg: Config,
    config_path: Option<PathBuf>,
    seed: u64,
    root: PathBuf,
}

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(p) => Config::load(p),
        None => Config::parse(""),
    }
}

fn resolve_seed(common: &Common, cfg: &Config) -> Result<u64> {
    if let Some(s) = common.seed {
        return Ok(s);
    }
    if let Some(s) = cfg.seed {
        return Ok(s);
    }
    if std::env::var(TEST_MODE_ENV).as_deref() == Ok("1") {
        return Err(Error::Config(
            "no seed given (--seed flag or `seed` in the config) and \
             MAESEG_TEST_MODE=1 requires one"
                .into(),
        ));
    }
    log::warn!("no seed given; defaulting to 0");
    Ok(0)
}

/// Returns None when --dry-run already printed the resolved config.
fn setup(common: &Common, mut cfg: Config) -> Result<Option<Setup>> {
    cfg.validate()?;
    let seed = resolve_seed(common, &cfg)?;
    cfg.seed = Some(seed);
    if common.dry_run {
        print!(
            "{}",
            toml::to_string_pretty(&cfg)
                .map_err(|e| Error::Format(format!("config render: {e}")))?
        );
        return Ok(None);
    }
    let flag = common.out.as_ref().map(|p| p.display().to_string());
    let root = resolve_out_root(flag.as_deref(), &cfg);
    Ok(Some(Setup { cfg, config_path: common.config.clone(), seed, root }))
}

/// Prefix an error with the pipeline stage that produced it, preserving
/// the configuration/runtime exit-code split.
fn in_stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("stage {name}: {m}")),
        Error::Shape(m) => Error::Shape(format!("stage {name}: {m}")),
        Error::Precondition(m) => Error::Precondition(format!("stage {name}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("stage {name}: {m}")),
        Error::Generation(m) => Error::Generation(format!("stage {name}: {m}")),
        Error::Format(m) => Error::Format(format!("stage {name}: {m}")),
        other => Error::Format(format!("stage {name}: {other}")),
    })
}

fn manifest_for(command: &str, setup: &Setup) -> RunManifest {
    RunManifest::new(command, setup.config_path.as_deref(), &setup.cfg, setup.seed)
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.cmd.common();
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;

    match cli.cmd {
        Cmd::Generate { ref common, ref family, labeled, unlabeled, val, test } => {
            let mut cfg = load_config(common)?;
            if let Some(f) = family {
                cfg.data.family = f.clone();
            }
            if let Some(n) = labeled {
                cfg.data.labeled = n;
            }
            if let Some(n) = unlabeled {
                cfg.data.unlabeled = n;
            }
            if let Some(n) = val {
                cfg.data.val = n;
            }
            if let Some(n) = test {
                cfg.data.test = n;
            }
            let Some(s) = setup(common, cfg)? else { return Ok(()) };
            let (_, mpath, reused) = tasks::ensure_dataset(&s.root, &s.cfg, s.seed)?;
            if reused {
                log::info!("dataset already present; nothing to do");
            }
            let mut rm = manifest_for("generate", &s);
            rm.add_artifact("manifest", &mpath);
            rm.save(&tasks::data_dir(&s.root, &s.cfg).join("run.json"))?;
        }

        Cmd::Pretrain { ref common } => {
            let Some(s) = setup(common, load_config(common)?)? else { return Ok(()) };
            let (man, _, _) = tasks::ensure_dataset(&s.root, &s.cfg, s.seed)?;
            let out = tasks::run_pretrain(&s.root, &s.cfg, &man, s.seed)?;
            log::info!("pretraining done, final loss {:.6}", out.report.final_loss);
            let mut rm = manifest_for("pretrain", &s);
            rm.add_artifact("checkpoint", &out.ckpt);
            rm.add_artifact("loss_csv", &out.loss_csv);
            rm.save(&s.root.join("pretrain/run.json"))?;
        }

        Cmd::Finetune { ref common, ref encoder_from, labeled_count } => {
            let Some(s) = setup(common, load_config(common)?)? else { return Ok(()) };
            let (man, _, _) = tasks::ensure_dataset(&s.root, &s.cfg, s.seed)?;
            let enc: Option<PathBuf> = match encoder_from {
                Some(p) => Some(p.clone()),
                None => {
                    let default = s.root.join("pretrain/mae.ckpt");
                    if default.exists() {
                        log::info!("using pretrained encoder {}", default.display());
                        Some(default)
                    } else {
                        log::warn!(
                            "no pretraining checkpoint at {}; encoder starts from scratch",
                            default.display()
                        );
                        None
                    }
                }
            };
            let out = tasks::run_finetune(
                &s.root,
                &s.cfg,
                &man,
                s.seed,
                enc.as_deref(),
                labeled_count,
                "finetune",
            )?;
            log::info!("fine-tuning done, final loss {:.6}", out.report.final_loss);
            let mut rm = manifest_for("finetune", &s);
            rm.add_artifact("checkpoint", &out.ckpt);
            rm.add_artifact("loss_csv", &out.loss_csv);
            rm.save(&s.root.join("finetune/run.json"))?;
        }

        Cmd::TrainSsl { ref common, labeled_count } => {
            let Some(s) = setup(common, load_config(common)?)? else { return Ok(()) };
            let (man, _, _) = tasks::ensure_dataset(&s.root, &s.cfg, s.seed)?;
            let out = tasks::run_ssl(&s.root, &s.cfg, &man, s.seed, labeled_count, "ssl", None)?;
            log::info!("ssl training done, final loss {:.6}", out.report.final_loss);
            let mut rm = manifest_for("train-ssl", &s);
            rm.add_artifact("checkpoint", &out.ckpt);
            rm.add_artifact("loss_csv", &out.loss_csv);
            rm.add_artifact("pseudo_quality", &s.root.join("ssl/pseudo_quality.csv"));
            rm.save(&s.root.join("ssl/run.json"))?;
        }

        Cmd::Evaluate { ref common, ref checkpoint, ref manifest, ref split } => {
            let Some(s) = setup(common, load_config(common)?)? else { return Ok(()) };
            let ckpt = checkpoint
                .clone()
                .unwrap_or_else(|| s.root.join("finetune/seg.ckpt"));
            let mpath = manifest
                .clone()
                .unwrap_or_else(|| tasks::data_dir(&s.root, &s.cfg).join("manifest.json"));
            let man = Manifest::load(&mpath)?;
            let out = tasks::run_evaluate(&s.root.join("evaluate"), &ckpt, &man, split, &s.cfg)?;
            print!("{}", out.report.to_table(&format!("split '{split}'")));
            let mut rm = manifest_for("evaluate", &s);
            rm.add_artifact("metrics", &out.csv);
            rm.add_artifact("report", &out.table);
            rm.add_artifact("predictions", &out.pred_dir);
            rm.save(&s.root.join("evaluate/run.json"))?;
        }

        Cmd::Pipeline { ref common } => {
            let Some(s) = setup(common, load_config(common)?)? else { return Ok(()) };
            let (man, mpath, _) =
                in_stage("generate", tasks::ensure_dataset(&s.root, &s.cfg, s.seed))?;
            let pre = in_stage("pretrain", tasks::run_pretrain(&s.root, &s.cfg, &man, s.seed))?;
            let ft = in_stage(
                "finetune",
                tasks::run_finetune(
                    &s.root,
                    &s.cfg,
                    &man,
                    s.seed,
                    Some(&pre.ckpt),
                    None,
                    "finetune",
                ),
            )?;
            let ev = in_stage(
                "evaluate",
                tasks::run_evaluate(&s.root.join("evaluate"), &ft.ckpt, &man, SPLIT_TEST, &s.cfg),
            )?;
            print!("{}", ev.report.to_table("pipeline test split"));
            let mut rm = manifest_for("pipeline", &s);
            rm.add_artifact("manifest", &mpath);
            rm.add_artifact("mae_checkpoint", &pre.ckpt);
            rm.add_artifact("seg_checkpoint", &ft.ckpt);
            rm.add_artifact("metrics", &ev.csv);
            rm.add_artifact("report", &ev.table);
            rm.save(&s.root.join("run.json"))?;
        }

        Cmd::Transfer { ref common, ref config_b, ref labeled_counts } => {
            let cfg_a = load_config(common)?;
            let cfg_b = match config_b {
                Some(p) => Config::load(p)?,
                None => {
                    let mut b = cfg_a.clone();
                    b.data.family = "pelvis-like".into();
                    b.validate()?;
                    b
                }
            };
            let Some(s) = setup(common, cfg_a)? else { return Ok(()) };
            if labeled_counts.is_empty() {
                return Err(Error::Config("labeled-counts must not be empty".into()));
            }
            let arms = tasks::run_transfer(&s.root, &s.cfg, &cfg_b, s.seed, labeled_counts)?;
            for a in &arms {
                let (dm, ds) = a.report.dsc_mean_sd;
                println!(
                    "labeled={:<3} {:<14} DSC {:.2}+/-{:.2} %",
                    a.labeled,
                    a.arm,
                    100.0 * dm,
                    100.0 * ds
                );
            }
            let mut rm = manifest_for("transfer", &s);
            rm.add_artifact("report", &s.root.join("transfer/report.txt"));
            rm.save(&s.root.join("transfer/run.json"))?;
        }
    }
    Ok(())
}
