use std::process::exit;

fn main() {
    env_logger::init();
    exit(selenc::cli::run());
}
