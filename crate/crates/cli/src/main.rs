fn main() {
    std::process::exit(efraft_cli::run(std::env::args_os()));
}
