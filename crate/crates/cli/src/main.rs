use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use destnet::config::RunConfig;
use destnet::data::write_manifest;
use destnet::experiment::{self, Comparison, ComparisonRow};
use destnet::gradcheck;
use destnet::training::{hex, load_checkpoint};
use destnet::Error;

#[derive(Parser)]
#[command(name = "destnet", version, about = "Train and evaluate spatial-transformer alignment stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (flat key = value file). Defaults apply when omitted.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Checkpoint to resume from (train) or evaluate (eval; repeatable).
    #[arg(long)]
    checkpoint: Vec<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks of every op and two full stacks.
    Gradcheck(Common),
    /// Train one model and write metrics and a checkpoint.
    Train(Common),
    /// Evaluate one or more checkpoints on the frozen test set.
    Eval(Common),
    /// Train and evaluate several configs on identical data.
    Compare(Common),
    /// Write a synthetic document set as PGM files plus a manifest.
    Generate(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Gradcheck(c) => cmd_gradcheck(&c),
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Compare(c) => cmd_compare(&c),
        Command::Generate(c) => cmd_generate(&c),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

type CmdResult = destnet::Result<ExitCode>;

fn load_config(path: Option<&Path>, seed: Option<u64>) -> destnet::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_config(c: &Common) -> destnet::Result<RunConfig> {
    if c.config.len() > 1 {
        return Err(Error::Usage("this command takes at most one --config".into()));
    }
    load_config(c.config.first().map(PathBuf::as_path), c.seed)
}

fn run_dir(c: &Common, command: &str) -> destnet::Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Echoed config, seed and the hash of this executable.
fn write_provenance(dir: &Path, cfg: &RunConfig) -> destnet::Result<()> {
    std::fs::write(dir.join("config.txt"), cfg.render())?;
    std::fs::write(dir.join("seed.txt"), format!("{}\n", cfg.seed))?;
    let exe = std::env::current_exe()?;
    let digest = Sha256::digest(std::fs::read(&exe)?);
    std::fs::write(
        dir.join("binary.sha256"),
        format!("{}  {}\n", hex(&digest), exe.display()),
    )?;
    Ok(())
}

fn cmd_gradcheck(c: &Common) -> CmdResult {
    let cfg = single_config(c)?;
    let reports = gradcheck::run_all(cfg.seed, cfg.gradcheck_fault.as_deref())?;
    for r in &reports {
        println!("{r}");
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} gradient checks passed", reports.len());
        Ok(ExitCode::SUCCESS)
    } else {
        for r in reports.iter().filter(|r| !r.passed()) {
            eprintln!("failed: {} (worst at {}[{}])", r.name, r.worst_tensor, r.worst_index);
        }
        Ok(ExitCode::from(1))
    }
}

fn cmd_train(c: &Common) -> CmdResult {
    let cfg = single_config(c)?;
    let dir = run_dir(c, "train")?;
    write_provenance(&dir, &cfg)?;
    let resume = match c.checkpoint.as_slice() {
        [] => None,
        [p] => {
            let loaded = load_checkpoint(p, Some(&cfg.hash()))?;
            if let Some(w) = &loaded.warning {
                eprintln!("warning: {w}");
            }
            Some(loaded.checkpoint)
        }
        _ => return Err(Error::Usage("train resumes from at most one --checkpoint".into())),
    };
    let raw = experiment::load_raw(&cfg)?;
    let data = experiment::prepare(&raw, &cfg, cfg.sigma)?;
    let (_, report) = experiment::train_model(&cfg, &data, Some(&dir), resume)?;
    let ckpt = dir.join("checkpoint.ckpt");
    report.checkpoint.save(&ckpt)?;
    if let Some(last) = report.metrics.last() {
        println!("iteration {} loss {:.6}", last.iteration, last.loss);
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(c: &Common) -> CmdResult {
    let cfg = single_config(c)?;
    if c.checkpoint.is_empty() {
        return Err(Error::Usage("eval needs --checkpoint".into()));
    }
    let dir = run_dir(c, "eval")?;
    write_provenance(&dir, &cfg)?;
    let raw = experiment::load_raw(&cfg)?;
    let data = experiment::prepare(&raw, &cfg, cfg.sigma)?;
    let mut table = Comparison {
        auc_threshold: cfg.auc_threshold,
        rows: Vec::new(),
    };
    for (i, path) in c.checkpoint.iter().enumerate() {
        let loaded = load_checkpoint(path, Some(&cfg.hash()))?;
        if let Some(w) = &loaded.warning {
            eprintln!("warning: {w}");
        }
        let mut model = experiment::build_model(&cfg, &data)?;
        loaded.checkpoint.restore_into(&mut model.store)?;
        let sub = if c.checkpoint.len() == 1 { dir.clone() } else { dir.join(format!("checkpoint{i}")) };
        let report = experiment::evaluate(&cfg, &model, &data.test, Some(&sub))?;
        print!("{}", report.to_csv());
        table.rows.push(ComparisonRow {
            sigma: cfg.sigma,
            model: path.display().to_string(),
            test_error: report.test_error,
            auc: report.auc,
            final_loss: None,
        });
    }
    if table.rows.len() > 1 {
        print!("{}", table.render());
        std::fs::write(dir.join("comparison.csv"), table.to_csv())?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(c: &Common) -> CmdResult {
    if c.config.len() < 2 {
        return Err(Error::Usage("compare needs at least two --config files".into()));
    }
    let configs = c
        .config
        .iter()
        .map(|p| load_config(Some(p), c.seed))
        .collect::<destnet::Result<Vec<_>>>()?;
    let dir = run_dir(c, "compare")?;
    for (i, cfg) in configs.iter().enumerate() {
        let sub = dir.join(format!("config{i}"));
        std::fs::create_dir_all(&sub)?;
        write_provenance(&sub, cfg)?;
    }
    let table = experiment::compare(&configs, Some(&dir))?;
    print!("{}", table.render());
    Ok(ExitCode::SUCCESS)
}

fn cmd_generate(c: &Common) -> CmdResult {
    let cfg = single_config(c)?;
    let dir = run_dir(c, "generate")?;
    write_provenance(&dir, &cfg)?;
    let doc_cfg = RunConfig {
        source: destnet::config::DataSource::Documents,
        manifest: None,
        ..cfg.clone()
    };
    let data = experiment::prepare(&experiment::load_raw(&doc_cfg)?, &doc_cfg, cfg.sigma)?;
    let train = match data.train {
        destnet::data::SampleSource::Fixed(s) => s,
        destnet::data::SampleSource::OnTheFly { .. } => unreachable!("documents are pre-generated"),
    };
    let all: Vec<_> = train.into_iter().chain(data.test).collect();
    let manifest = write_manifest(&dir, &all)?;
    println!("{} documents, manifest: {}", all.len(), manifest.display());
    Ok(ExitCode::SUCCESS)
}
