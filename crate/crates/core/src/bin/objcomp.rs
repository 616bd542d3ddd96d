use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objcomp::app::{cmd_compose, cmd_invert, cmd_masks, Invocation};

#[derive(Parser)]
#[command(name = "objcomp", version, about = "Multi-object diffusion composition on analytic denoisers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a scene and write final.npy, preview.pgm and manifest.json
    Compose(Common),
    /// Invert the config's init image and save the trajectory
    Invert(Common),
    /// Derive object masks from a saved inversion
    Masks(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, short)]
    verbose: bool,
}

impl Common {
    fn invocation(&self) -> Invocation {
        let level = if self.verbose { "info" } else { "warn" };
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
        Invocation {
            config: self.config.clone(),
            output_dir: self.output_dir.clone(),
        }
    }
}

fn main() -> ExitCode {
    let code = match Cli::parse().command {
        Command::Compose(c) => cmd_compose(&c.invocation()),
        Command::Invert(c) => cmd_invert(&c.invocation()),
        Command::Masks(c) => cmd_masks(&c.invocation()),
    };
    ExitCode::from(code as u8)
}
