use clap::{CommandFactory, FromArgMatches};

use rtn::cli::{config_help, run, Cli};

fn main() {
    let help = config_help();
    let matches = Cli::command()
        .after_help(help.clone())
        .mut_subcommands(|c| c.after_help(help.clone()))
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    std::process::exit(run(cli));
}
