fn main() {
    std::process::exit(belief_mppi::cli::run_cli(std::env::args_os()));
}
