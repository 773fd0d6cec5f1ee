use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use eshadow::certify::Schedule;
use eshadow_cli::commands::{
    cmd_certify, cmd_fit, cmd_mc_validate, cmd_plan, cmd_render, cmd_simulate_online, CertifyArgs, RenderArgs,
    SimulateArgs, DEFAULT_EPS_PRECISION, EXIT_INPUT,
};

#[derive(Parser)]
#[command(name = "eshadow", version, about = "Certify, plan and validate around uncertain polytopes")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleArg {
    Additive,
    LogScale,
}

impl From<ScheduleArg> for Schedule {
    fn from(s: ScheduleArg) -> Self {
        match s {
            ScheduleArg::Additive => Schedule::Additive,
            ScheduleArg::LogScale => Schedule::LogScale,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Certify the scene trajectory and report per-obstacle risk.
    Certify {
        scene: PathBuf,
        /// Total search precision, split evenly over obstacles.
        #[arg(long, default_value_t = DEFAULT_EPS_PRECISION)]
        eps_precision: f64,
        /// Exit 1 when the certified total exceeds this.
        #[arg(long)]
        max_risk: Option<f64>,
        /// Give every obstacle the same risk.
        #[arg(long)]
        uniform_allocation: bool,
        #[arg(long, value_enum, default_value = "additive")]
        schedule: ScheduleArg,
        /// Certificate output file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan with the risk-bounded RRT and recertify the result.
    Plan {
        scene: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the online script and estimate failure per stop time.
    SimulateOnline {
        scene: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long)]
        disable_ledger: bool,
        #[arg(long)]
        eps_precision: Option<f64>,
        #[arg(long, value_enum, default_value = "additive")]
        schedule: ScheduleArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw the scene, shadows and paths as SVG.
    Render {
        scene: PathBuf,
        /// Certificate whose recorded levels are drawn.
        #[arg(long)]
        certificate: Option<PathBuf>,
        /// Risk levels drawn around every obstacle.
        #[arg(long, value_delimiter = ',')]
        eps: Vec<f64>,
        /// xmin,ymin,xmax,ymax
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        window: Option<Vec<f64>>,
        #[arg(long, default_value_t = 200)]
        resolution: usize,
        /// Output of `plan`, drawn with its tree.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a certificate against Monte-Carlo collision frequency.
    McValidate {
        scene: PathBuf,
        certificate: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
    },
    /// Replace point-cloud faces by fitted Gaussian faces.
    Fit {
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INPUT as u8 } else { 0 });
        }
    };
    let seed = cli.seed;
    if let Command::Render { window: Some(w), .. } = &cli.command {
        if w.len() != 4 {
            eprintln!("error: --window takes xmin,ymin,xmax,ymax");
            return ExitCode::from(EXIT_INPUT as u8);
        }
    }
    let result = match cli.command {
        Command::Certify {
            scene,
            eps_precision,
            max_risk,
            uniform_allocation,
            schedule,
            out,
        } => cmd_certify(
            &scene,
            &CertifyArgs {
                eps_precision,
                max_risk,
                uniform_allocation,
                schedule: schedule.into(),
            },
            out.as_deref(),
        ),
        Command::Plan { scene, out } => cmd_plan(&scene, seed, out.as_deref()),
        Command::SimulateOnline {
            scene,
            trials,
            disable_ledger,
            eps_precision,
            schedule,
            out,
        } => cmd_simulate_online(
            &scene,
            &SimulateArgs {
                trials,
                seed,
                disable_ledger,
                eps_precision,
                schedule: schedule.into(),
            },
            out.as_deref(),
        ),
        Command::Render {
            scene,
            certificate,
            eps,
            window,
            resolution,
            plan,
            out,
        } => cmd_render(
            &scene,
            &RenderArgs {
                certificate,
                eps,
                window: window.map(|w| [w[0], w[1], w[2], w[3]]),
                resolution,
                plan,
            },
            &out,
        ),
        Command::McValidate {
            scene,
            certificate,
            trials,
        } => cmd_mc_validate(&scene, &certificate, trials, seed),
        Command::Fit { scene, out } => cmd_fit(&scene, &out),
    };
    match result {
        Ok(o) => {
            print!("{}", o.report);
            ExitCode::from(o.code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT as u8)
        }
    }
}
