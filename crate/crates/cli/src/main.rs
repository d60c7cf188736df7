use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vox2p1d::Result;
use vox2p1d_cli::{cache_root, cmd_cv, cmd_extract, cmd_report, cmd_synth, commands, exit_code, PipelineConfig};

#[derive(Parser)]
#[command(name = "vox2p1d", version, about = "Slice-based classification of 3D probability maps")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom cohort from a JSON spec.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract and cache max-pooled feature maps.
    Extract {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run repeated cross-validation and write the report.
    Cv {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a saved report, with the parameter audit.
    Report { report: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let manifest = cmd_synth(&spec, &out)?;
            println!("wrote {} subjects to {}", manifest.subjects.len(), out.display());
        }
        Command::Extract { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = cfg.resolve_out(out.as_deref())?;
            let cache = cache_root(&out);
            let e = cmd_extract(&cfg, &cache)?;
            println!(
                "{} subjects: {} cached, {} extracted into {}",
                e.bank.subjects.len(),
                e.hits,
                e.misses,
                cache.display()
            );
        }
        Command::Cv { config, out } => {
            let cfg = PipelineConfig::load(&config)?;
            let out = cfg.resolve_out(out.as_deref())?;
            let report = cmd_cv(&cfg, &out, &cache_root(&out))?;
            print!("{}", commands::summary_table(&report));
            println!("report: {}", commands::report_path(&out).display());
        }
        Command::Report { report } => print!("{}", cmd_report(&report)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
