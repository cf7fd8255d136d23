//! `mno` command-line entry point.
//!
//! Exit status: 0 on success, 2 on argument errors, 1 on runtime errors.

mod args;
mod runs;
mod util;

use clap::Parser;
use mno_core::Error;

use args::{Cli, Command};

fn dispatch(cli: Cli) -> mno_core::Result<()> {
    match cli.command {
        Command::GenData(a) => runs::gen_data(a),
        Command::Train(a) => runs::train_cmd(a),
        Command::Eval(a) => runs::eval_cmd(a),
        Command::Ablate(a) => runs::ablate_cmd(a),
        Command::Gradcheck(a) => runs::gradcheck_cmd(a),
        Command::Bench(a) => runs::bench_cmd(a),
        Command::DumpFields(a) => runs::dump_fields_cmd(a),
    }
}

fn main() {
    // clap itself exits with status 2 on unknown flags or bad usage.
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err @ Error::Argument(_)) => {
            eprintln!("error: {err}");
            std::process::exit(2);
        }
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(1);
        }
    }
}
