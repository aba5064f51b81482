use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use quickclear::harness::{self, HarnessError, Mode, PortMap, RunManifest};
use quickclear::metrics::LatencyReport;
use quickclear::scenario::Preset;

#[derive(Parser)]
#[command(
    name = "quickclear",
    version,
    about = "CAV to UAV to CMP relay testbed"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment preset and write its report.
    Run(RunArgs),
    /// Run the incident demo and check every link of the chain.
    QuickClear(RunArgs),
    /// Rebuild the summary report from a raw records CSV.
    Analyze {
        records: PathBuf,
        /// Where to write the summary (.json for JSON, CSV otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// exp1, exp2 or exp2-dynamic. quick-clear defaults to exp2-dynamic.
    #[arg(long)]
    preset: Option<Preset>,
    #[arg(long, default_value = "sim")]
    mode: Mode,
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file merged over the preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    duration_ms: Option<u64>,
    #[arg(long)]
    udp_port: Option<u16>,
    #[arg(long)]
    cmp_port: Option<u16>,
    #[arg(long)]
    ws_port: Option<u16>,
}

impl RunArgs {
    fn manifest(self, default_preset: Preset) -> RunManifest {
        RunManifest {
            preset: self.preset.unwrap_or(default_preset),
            mode: self.mode,
            seed: self.seed,
            duration_ms: self.duration_ms,
            config: self.config,
            out_dir: self.out,
            ports: PortMap {
                udp: self.udp_port,
                cmp: self.cmp_port,
                ws: self.ws_port,
            },
        }
    }
}

fn print_report(report: &LatencyReport) {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
    println!(
        "{:<8} {:>6} {:>6} {:>7} {:>9} {:>9} {:>9}",
        "hop", "sent", "recv", "drop%", "mean_ms", "median", "p95"
    );
    for h in &report.hops {
        println!(
            "{:<8} {:>6} {:>6} {:>7.2} {:>9} {:>9} {:>9}",
            h.hop.as_str(),
            h.count_sent,
            h.count_received,
            h.drop_pct,
            fmt(h.mean_ms),
            fmt(h.median_ms),
            fmt(h.p95_ms)
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => {
            let manifest = args.manifest(Preset::Exp2);
            let summary = harness::run(&manifest)?;
            print_report(&summary.report);
            println!("artifacts in {}", summary.out_dir.display());
        }
        Command::QuickClear(args) => {
            let manifest = args.manifest(Preset::Exp2Dynamic);
            match harness::quick_clear(&manifest) {
                Ok(t) => {
                    print!("{}", t.render());
                    println!("artifacts in {}", manifest.out_dir.display());
                }
                Err(HarnessError::ChainBroken { stage, transcript }) => {
                    print!("{}", transcript.render());
                    anyhow::bail!("chain broken at {stage}");
                }
                Err(e) => return Err(e.into()),
            }
        }
        Command::Analyze { records, out } => {
            let report = harness::analyze(&records, out.as_deref())
                .with_context(|| format!("analyzing {}", records.display()))?;
            print_report(&report);
        }
    }
    Ok(())
}
