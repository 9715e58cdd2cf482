use std::process::exit;

fn main() {
    exit(trajbound_cli::run(std::env::args_os()));
}
