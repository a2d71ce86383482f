mod args;
mod commands;

use clap::Parser;

use args::{Cli, Command};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Scene(a) => commands::scene(a),
        Command::Refine(a) => commands::refine(a),
        Command::Complete(a) => commands::complete(a),
        Command::UpsampleAblate(a) => commands::upsample_ablate(a),
        Command::Eval(a) => commands::eval(a),
        Command::TrainPolicy(a) => commands::train_policy(a),
    }
}
