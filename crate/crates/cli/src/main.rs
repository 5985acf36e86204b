// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use partprobe::experiment::{
    run_clip_probe, run_cooccurrence, run_experiment, run_filter, run_segmentation, verify_dump, write_dumps,
    Experiment, ExperimentConfig, Overrides, RunSummary,
};
use partprobe::interchange::DType;
use partprobe::knockout::{plan_for_region, DecoderScope, PlanDescriptor};
use partprobe::toy::write_toy_workspace;
use partprobe::vlm::VlmConfig;

#[derive(Parser)]
#[command(
    name = "partprobe",
    version,
    about = "Object-part identifiability probes for vision-language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `run.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; 0 uses available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        Overrides {
            out: self.out.clone(),
            workers: self.workers,
            seed: self.seed,
        }
        .apply(&mut cfg);
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    ImageOnly,
    AllPast,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Score every region under every configured plan.
    Run(Common),
    /// Apply the annotation filters and write the dataset table.
    Filter(Common),
    /// Sweep the CLS focus layer of the image encoder.
    ClipProbe(Common),
    /// Patch-label segmentation scored by mIoU.
    Segment(Common),
    /// Count object/part co-occurrence in a caption corpus.
    Cooccur(Common),
    /// Check an interchange directory's checksums, shapes and lens closure.
    DumpVerify {
        dir: PathBuf,
        /// Allowed |lens logit − stored logit| at the final layer.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Write the serialized intervention plan for one region.
    ExportPlan {
        /// Experiment TOML whose model supplies the depths.
        #[arg(long, conflicts_with = "model_config")]
        config: Option<PathBuf>,
        /// Model configuration JSON, for checkpoints outside a config.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        plan: String,
        /// Comma-separated target patch indices.
        #[arg(long, value_delimiter = ',')]
        patches: Vec<usize>,
        #[arg(long, value_enum, default_value = "image-only")]
        scope: Scope,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export region traces of an in-process model as activation dumps.
    ExportDumps {
        #[command(flatten)]
        common: Common,
        /// Dump root directory.
        #[arg(long)]
        dumps: PathBuf,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Write a self-contained toy workspace with an example config.
    GenToy {
        dir: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn report(summary: &RunSummary) -> ExitCode {
    for f in &summary.files {
        println!("{}", f.display());
    }
    if summary.region_errors > 0 {
        eprintln!("{} region(s) failed; see the error reports", summary.region_errors);
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn model_config(config: Option<&Path>, model_config: Option<&Path>) -> anyhow::Result<VlmConfig> {
    match (config, model_config) {
        (Some(c), _) => {
            let exp = Experiment::load(ExperimentConfig::load(c)?)?;
            match exp.vlm() {
                Some(v) => Ok(v.config.clone()),
                None => bail!("config {} has no in-process model; pass --model-config", c.display()),
            }
        }
        (None, Some(m)) => {
            let text = std::fs::read_to_string(m).with_context(|| format!("reading {}", m.display()))?;
            let cfg: VlmConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", m.display()))?;
            cfg.validate()?;
            Ok(cfg)
        }
        (None, None) => bail!("export-plan needs --config or --model-config"),
    }
}

fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    Ok(match cli.command {
        Command::Run(c) => report(&run_experiment(c.load()?)?),
        Command::Filter(c) => report(&run_filter(c.load()?)?),
        Command::ClipProbe(c) => report(&run_clip_probe(c.load()?)?),
        Command::Segment(c) => report(&run_segmentation(c.load()?)?),
        Command::Cooccur(c) => report(&run_cooccurrence(&c.load()?)?),
        Command::DumpVerify { dir, tolerance } => {
            let check = verify_dump(&dir, tolerance)?;
            println!("{}", serde_json::to_string_pretty(&check)?);
            if check.within_tolerance {
                ExitCode::SUCCESS
            } else {
                eprintln!("lens closure exceeds tolerance {tolerance}");
                ExitCode::from(2)
            }
        }
        Command::ExportPlan {
            config,
            model_config: mc,
            plan,
            patches,
            scope,
            out,
        } => {
            let vlm = model_config(config.as_deref(), mc.as_deref())?;
            let descriptor: PlanDescriptor = plan.parse()?;
            let scope = match scope {
                Scope::ImageOnly => DecoderScope::ImageOnly,
                Scope::AllPast => DecoderScope::AllPast,
            };
            let p = plan_for_region(&vlm, descriptor, &patches, scope)?;
            let text = serde_json::to_string_pretty(&p)? + "\n";
            match out {
                Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{text}"),
            }
            ExitCode::SUCCESS
        }
        Command::ExportDumps {
            common,
            dumps,
            precision,
        } => {
            let exp = Experiment::load(common.load()?)?;
            let dtype = match precision {
                Precision::F32 => DType::F32,
                Precision::F64 => DType::F64,
            };
            for d in write_dumps(&exp, &dumps, dtype)? {
                println!("{}", d.display());
            }
            ExitCode::SUCCESS
        }
        Command::GenToy { dir, seed } => {
            println!("{}", write_toy_workspace(&dir, seed)?.display());
            ExitCode::SUCCESS
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
