fn main() {
    std::process::exit(elo_forge_cli::run_cli(std::env::args_os()));
}
