mod commands;
mod params;

use std::process::ExitCode;

use clap::Command;

fn cli() -> Command {
    commands::ALL.iter().fold(
        Command::new("dgnam")
            .about("Activation maximization through a learned generator prior")
            .subcommand_required(true)
            .arg_required_else_help(true),
        |cmd, sub| cmd.subcommand(params::command(sub.name, sub.about, &(sub.keys)())),
    )
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.render().to_string();
            eprintln!("{}", first.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let entry = commands::ALL.iter().find(|c| c.name == name).expect("registered subcommand");
    match params::Params::resolve(entry.name, &(entry.keys)(), sub).and_then(|p| (entry.run)(&p)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn command_tree_is_consistent() {
        super::cli().debug_assert();
    }
}
