use clap::Parser;

use fleetsched::cli::{run, Cli};
use fleetsched::exec::init_thread_pool_from_env;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_thread_pool_from_env();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
