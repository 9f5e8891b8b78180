use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stmi_core::container::write_atomic;
use stmi_core::data::{generate_dataset, Dataset};
use stmi_core::harness::ablate::ablate;
use stmi_core::harness::checkpoint;
use stmi_core::harness::grad_check::{micro_config, GradCheckSetup};
use stmi_core::harness::train::{evaluate_model, token_masks};
use stmi_core::harness::{RunConfig, Trainer};
use stmi_core::Error;

#[derive(Parser)]
#[command(name = "stmi", version, about = "Multi-modal re-identification on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenData(Common),
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; synthesized from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint directory, using its configuration.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps (the schedule still spans `steps`).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on the query/gallery splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient check on the micro configuration.
    GradCheck(Common),
    /// Train and compare the four module configurations.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

struct Failure {
    kind: &'static str,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            kind: e.kind(),
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common, base: RunConfig) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::parse_over(base, &text)?
        }
        None => base,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(dir: Option<&Path>, cfg: &RunConfig) -> Result<Dataset, Error> {
    match dir {
        Some(dir) => Dataset::load(dir),
        None => Dataset::synthesize(&cfg.generator()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    write_atomic(path, text.as_bytes())
}

fn gen_data(common: &Common) -> CmdResult {
    let cfg = load_config(common, RunConfig::default())?;
    let manifest = generate_dataset(&cfg.generator(), &common.out)?;
    println!("samples={} identities={} out={}", manifest.samples.len(), manifest.num_ids, common.out.display());
    Ok(())
}

fn train(common: &Common, data: Option<&Path>, resume: Option<&Path>, stop_after: Option<usize>) -> CmdResult {
    let (cfg, state) = match resume {
        Some(dir) => {
            let (cfg, state) = checkpoint::load(dir)?;
            (cfg, Some(state))
        }
        None => (load_config(common, RunConfig::default())?, None),
    };
    let dataset = load_data(data, &cfg)?;
    let mut trainer = match state {
        Some(state) => Trainer::resume(cfg.clone(), &dataset, state)?,
        None => Trainer::new(cfg.clone(), &dataset)?,
    };
    let until = stop_after.unwrap_or(cfg.steps).min(cfg.steps);
    while trainer.state.step < until {
        let seen = trainer.state.log.len();
        trainer.run_until(trainer.state.step + 1)?;
        for line in trainer.state.log[seen..].iter().filter(|l| l.starts_with("eval")) {
            println!("{line}");
        }
    }
    checkpoint::save(common.out.join("checkpoint"), &cfg, &trainer.state)?;
    let mut log = trainer.state.log.join("\n");
    log.push('\n');
    write_text(&common.out.join("metrics.log"), &log)?;
    println!("step={} checkpoint={}", trainer.state.step, common.out.join("checkpoint").display());
    Ok(())
}

fn eval(common: &Common, ckpt: &Path, data: Option<&Path>) -> CmdResult {
    let (saved, state) = checkpoint::load(ckpt)?;
    let cfg = match &common.config {
        Some(_) => {
            let cfg = load_config(common, saved.clone())?;
            if cfg.encoder() != saved.encoder() || cfg.num_queries != saved.num_queries {
                return Err(Error::Geometry("evaluation config geometry differs from the checkpoint".into()).into());
            }
            cfg
        }
        None => saved,
    };
    let dataset = load_data(data, &cfg)?;
    let m = &dataset.manifest;
    if m.image_size != cfg.image_size || m.channels != cfg.channels || m.text_dim != cfg.dim {
        return Err(Error::Geometry(format!(
            "dataset {}x{}x{} text {} does not match checkpoint {}x{}x{} width {}",
            m.channels, m.image_size, m.image_size, m.text_dim, cfg.channels, cfg.image_size, cfg.image_size, cfg.dim
        ))
        .into());
    }
    let masks = token_masks(&dataset, cfg.patch, cfg.rho)?;
    let evaluation = evaluate_model(&cfg, &state.model, &state.params, &dataset, &masks)?;
    evaluation.write(&common.out.join("results.txt"), &common.out.join("ranked.txt"))?;
    print!("{}", evaluation.metrics.to_key_values());
    Ok(())
}

fn grad_check(common: &Common) -> CmdResult {
    let cfg = load_config(common, micro_config(0))?;
    let mut setup = GradCheckSetup::new(cfg)?;
    let report = setup.run(Default::default())?;
    let text = format!("tau={:?}\n{report}\n", setup.config.tau);
    write_text(&common.out.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if report.passed() {
        return Ok(());
    }
    let offenders: Vec<String> = report
        .offenders()
        .iter()
        .map(|p| format!("{} ({:.3e})", p.name, p.max_rel_err))
        .collect();
    Err(Failure {
        kind: "gradcheck",
        msg: format!("relative error above {:e}: {}", report.tolerance, offenders.join(", ")),
    })
}

fn ablation(common: &Common, data: Option<&Path>) -> CmdResult {
    let cfg = load_config(common, RunConfig::default())?;
    let dataset = load_data(data, &cfg)?;
    let table = ablate(&cfg, &dataset, |row| {
        println!("{} mAP={:?} R1={:?}", row.label, row.map, row.rank1);
    })?;
    write_text(&common.out.join("ablation.md"), &table.render())?;
    write_text(&common.out.join("ablation.txt"), &table.to_key_values())?;
    print!("{}", table.render());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match &cli.command {
        Command::GenData(common) => gen_data(common),
        Command::Train {
            common,
            data,
            resume,
            stop_after,
        } => train(common, data.as_deref(), resume.as_deref(), *stop_after),
        Command::Eval { common, checkpoint, data } => eval(common, checkpoint, data.as_deref()),
        Command::GradCheck(common) => grad_check(common),
        Command::Ablate { common, data } => ablation(common, data.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first:?}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} msg={:?}", f.kind, f.msg);
            ExitCode::FAILURE
        }
    }
}
