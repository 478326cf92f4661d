use log::LevelFilter;
use sparsecoint_cli::{resolve, run, CliError};

fn main() {
    let code = match resolve(std::env::args_os()) {
        Ok(inv) => {
            let level = match inv.verbosity {
                0 => LevelFilter::Warn,
                1 => LevelFilter::Info,
                _ => LevelFilter::Debug,
            };
            // Logging is configured by flags alone; RAYON_NUM_THREADS is the
            // only environment variable consulted.
            env_logger::Builder::new()
                .filter_level(level)
                .format_timestamp(None)
                .target(env_logger::Target::Stderr)
                .init();
            run(&inv.config)
        }
        Err(CliError::Args(e)) => {
            let _ = e.print();
            CliError::Args(e).exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}
