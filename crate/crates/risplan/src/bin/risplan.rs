fn main() {
    std::process::exit(risplan::cli::run_command(std::env::args()));
}
