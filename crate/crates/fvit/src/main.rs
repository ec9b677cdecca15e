fn main() {
    std::process::exit(fvit::cli::run_from_env());
}
