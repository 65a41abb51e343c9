use anyhow::Context;
use clap::Parser;

use mculora::cli::{execute, exit_code, Cli};

fn run(cli: &Cli) -> anyhow::Result<String> {
    let name = format!("{:?}", cli.command)
        .split('(')
        .next()
        .unwrap_or("command")
        .to_lowercase();
    execute(cli).with_context(|| format!("{name} failed"))
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(msg) => println!("{msg}"),
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err
                .downcast_ref::<mculora::Error>()
                .map_or(2, exit_code);
            std::process::exit(code);
        }
    }
}
