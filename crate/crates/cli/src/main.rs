use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use vfpflow::harness::validate::{validate_model, MODELS};
use vfpflow::harness::{generate_truth_and_obs, run_with_observer, ExperimentConfig, RunRecord};

#[derive(Parser)]
#[command(name = "vfpflow", version, about = "Constrained ensemble data assimilation twin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Overrides {
    /// Replace every seed in the config with this value.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Truncate the run to this many cycles.
    #[arg(long)]
    cycles: Option<usize>,
    /// Scale the Navier-Stokes grid by this factor.
    #[arg(long)]
    grid_scale: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a twin experiment and write its JSON and CSV records.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Print a progress line every N cycles.
        #[arg(long, default_value_t = 0)]
        progress: usize,
    },
    /// Generate the truth trajectory and observations only.
    Truth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Tabulate final RMSE and CRMSE across result files.
    Compare {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Run Jacobian and invariant self-checks for a model.
    Validate {
        #[arg(long, value_parser = MODELS)]
        model: String,
    },
}

fn load(config: &Path, o: &Overrides) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = o.seed_override {
        cfg.override_seed(s);
    }
    if let Some(c) = o.cycles {
        cfg.override_cycles(c);
    }
    if let Some(f) = o.grid_scale {
        cfg.override_grid_scale(f)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(config: &Path, out: &Path, o: &Overrides, progress: usize) -> anyhow::Result<()> {
    let cfg = load(config, o)?;
    let record = run_with_observer(&cfg, |v| {
        if progress > 0 && (v.cycle + 1) % progress == 0 {
            eprintln!("cycle {}/{}", v.cycle + 1, cfg.cycles);
        }
    })?;
    let (json_path, csv_path) = record.write_to_dir(out)?;
    println!("wrote {} and {}", json_path.display(), csv_path.display());
    print_summary(&record);
    if let Some(f) = &record.failure {
        bail!(vfpflow::Error::Unsupported(format!(
            "analysis failed at cycle {} ({}): {}",
            f.cycle, f.kind, f.message
        )));
    }
    Ok(())
}

fn print_summary(r: &RunRecord) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
    println!("{} {} on {}: {} cycles", r.metadata.name, r.metadata.method, r.metadata.model, r.cycles.len());
    println!("  rmse {}", fmt(r.final_rmse()));
    for (i, l) in r.metadata.crmse_labels.iter().enumerate() {
        println!("  crmse[{l}] {}", fmt(r.final_crmse(i)));
    }
}

fn truth(config: &Path, out: &Path, o: &Overrides) -> anyhow::Result<()> {
    let cfg = load(config, o)?;
    let run = generate_truth_and_obs(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{}_truth.json", cfg.name));
    std::fs::write(&path, serde_json::to_string(&run)?).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} ({} observations)", path.display(), run.observations.len());
    Ok(())
}

fn compare(files: &[PathBuf]) -> anyhow::Result<()> {
    let records = files
        .iter()
        .map(|f| RunRecord::read_json(f).map_err(anyhow::Error::from))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut labels: Vec<String> = Vec::new();
    for r in &records {
        for l in &r.metadata.crmse_labels {
            if !labels.contains(l) {
                labels.push(l.clone());
            }
        }
    }
    let mut header = format!("{:<24} {:<8} {:<9} {:>7} {:>12}", "name", "model", "method", "cycles", "rmse");
    for l in &labels {
        header.push_str(&format!(" {:>14}", format!("crmse[{l}]")));
    }
    header.push_str("  status");
    println!("{header}");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4e}"));
    for r in &records {
        let m = &r.metadata;
        let mut line = format!(
            "{:<24} {:<8} {:<9} {:>7} {:>12}",
            m.name,
            m.model,
            m.method,
            r.cycles.len(),
            fmt(r.final_rmse())
        );
        for l in &labels {
            let v = r.crmse_index(l).and_then(|i| r.final_crmse(i));
            line.push_str(&format!(" {:>14}", fmt(v)));
        }
        match &r.failure {
            Some(f) => line.push_str(&format!("  failed at cycle {} ({})", f.cycle, f.kind)),
            None => line.push_str("  ok"),
        }
        println!("{line}");
    }
    Ok(())
}

fn validate(model: &str) -> anyhow::Result<()> {
    let checks = validate_model(model)?;
    let mut failed = 0;
    for c in &checks {
        let tag = if c.passed { "PASS" } else { "FAIL" };
        println!("{tag} {model}: {} = {:.3e} (< {:.0e})", c.name, c.value, c.threshold);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn error_record(e: &anyhow::Error) -> serde_json::Value {
    let mut rec = json!({ "error": { "kind": "other", "message": format!("{e:#}") } });
    if let Some(core) = e.downcast_ref::<vfpflow::Error>() {
        rec["error"]["kind"] = json!(core.kind());
        if let vfpflow::Error::Config { path, .. } = core {
            rec["error"]["path"] = json!(path);
        }
    }
    rec
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            out,
            overrides,
            progress,
        } => run(config, out, overrides, *progress),
        Command::Truth { config, out, overrides } => truth(config, out, overrides),
        Command::Compare { files } => compare(files),
        Command::Validate { model } => validate(model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
