use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collarflow::{parse_config, run_sweep, ErrorReport, RunConfig};

#[derive(Parser)]
#[command(name = "collarflow", version, about = "Harmonic map flow on collars into warped-product targets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configuration (or a sweep of override blocks on top of it).
    Run {
        config: PathBuf,
        /// Output directory; defaults to `output.dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parse and validate only; writes nothing.
        #[arg(long)]
        validate_only: bool,
        /// File of override blocks separated by `---` lines.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
}

fn fail(report: ErrorReport, out: Option<&PathBuf>, code: u8) -> ExitCode {
    if let Some(dir) = out {
        let _ = report.write(dir);
    }
    println!("{}", serde_json::to_string(&report).expect("error report serializes"));
    ExitCode::from(code)
}

fn read(path: &PathBuf) -> Result<String, ErrorReport> {
    std::fs::read_to_string(path)
        .map_err(|e| ErrorReport::from_error(&collarflow::Error::Io(format!("{}: {e}", path.display()))))
}

fn main() -> ExitCode {
    let Cli { cmd: Cmd::Run { config, out, validate_only, sweep } } = Cli::parse();
    let text = match read(&config) {
        Ok(t) => t,
        Err(r) => return fail(r, None, 2),
    };
    let cfg: RunConfig = match parse_config(&text) {
        Ok(c) => c,
        Err(issues) => return fail(ErrorReport::from_issues(issues), None, 2),
    };
    let sweep_text = match sweep.as_ref().map(read).transpose() {
        Ok(s) => s,
        Err(r) => return fail(r, None, 2),
    };
    if let Some(s) = &sweep_text {
        if let Err(issues) = collarflow::runner::sweep_blocks(s).iter().try_for_each(|b| cfg.apply(b).map(|_| ())) {
            return fail(ErrorReport::from_issues(issues), None, 2);
        }
    }
    if validate_only {
        println!("{{\"valid\":true}}");
        return ExitCode::SUCCESS;
    }
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    match sweep_text {
        Some(s) => match run_sweep(&cfg, &s, &out) {
            Ok(entries) => {
                println!("{}", serde_json::to_string(&entries).expect("sweep entries serialize"));
                if entries.iter().all(|e| e.ok) {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(issues) => fail(ErrorReport::from_issues(issues), Some(&out), 2),
        },
        None => match collarflow::execute(&cfg, &out) {
            Ok(summary) => {
                println!(
                    "{{\"cause\":{},\"ell_end\":{},\"t_end\":{},\"out\":{}}}",
                    serde_json::to_string(&summary.cause).unwrap(),
                    summary.ell_end,
                    summary.t_end,
                    serde_json::to_string(&out.display().to_string()).unwrap()
                );
                ExitCode::SUCCESS
            }
            // execute already wrote error.json
            Err(e) => fail(ErrorReport::from_error(&e), None, 1),
        },
    }
}
