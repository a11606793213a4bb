use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use locksim::runner::{self, CommonArgs};

#[derive(Parser)]
#[command(name = "locksim", version, about = "Optical decoherence simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed and SIM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Does not change results.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

impl From<Common> for CommonArgs {
    fn from(c: Common) -> Self {
        CommonArgs {
            config: c.config,
            out: c.out,
            seed: c.seed,
            workers: c.workers,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one sequence and write its trace and echo summary.
    Simulate(Common),
    /// Fit a decay time at each value of a swept parameter.
    Sweep(Common),
    /// Find the bath correlation time that reproduces a target echo T2.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target_t2_us: Option<f64>,
        #[arg(long)]
        delta_khz: Option<f64>,
    },
    /// Superhyperfine pathway count and side-hole spectrum.
    Shf {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = locksim::shf::DEFAULT_THRESHOLD)]
        threshold: f64,
        /// Number of resampled neighbor configurations to add.
        #[arg(long, default_value_t = 0)]
        variants: usize,
    },
}

fn run(cmd: Command) -> locksim::Result<()> {
    match cmd {
        Command::Simulate(c) => {
            let s = runner::cmd_simulate(&c.into())?;
            for r in &s.readouts {
                let show = |e: &Option<runner::EchoSummary>| {
                    e.as_ref()
                        .map_or("-".to_string(), |e| format!("{:.6e} at {:.3} us", e.amplitude, e.peak_time_us))
                };
                println!("readout {}: I {} Q {}", r.index, show(&r.in_phase), show(&r.quadrature));
            }
        }
        Command::Sweep(c) => {
            for p in runner::cmd_sweep(&c.into())? {
                match (&p.fit, &p.error) {
                    (Some(f), _) => println!(
                        "{} = {}: t_dec = {:.4} +- {:.4} us ({:?})",
                        p.axis, p.swept_value, f.t_dec_us, f.stderr_us, f.quality_flag
                    ),
                    (None, e) => println!("{} = {}: failed: {}", p.axis, p.swept_value, e.as_deref().unwrap_or("")),
                }
            }
        }
        Command::Calibrate {
            common,
            target_t2_us,
            delta_khz,
        } => {
            let d = runner::cmd_calibrate(&common.into(), target_t2_us, delta_khz)?;
            println!(
                "tau_c = {:.6} us (T2 {:.3} us for target {:.3} us, {} evaluations)",
                d.bath.tau_c_us,
                d.t2_sim_us,
                d.target_t2_us,
                d.log.len()
            );
        }
        Command::Shf {
            common,
            threshold,
            variants,
        } => {
            let d = runner::cmd_shf(&common.into(), threshold, variants)?;
            println!("pathway_count = {}", d.report.pathway_count);
            println!("side_hole_weight = {:.6}", d.report.side_hole_weight);
            if let Some(v) = &d.variants {
                println!("variants: min {} median {} max {}", v.min, v.median, v.max);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(runner::exit_code(&e) as u8)
        }
    }
}
