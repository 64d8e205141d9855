fn main() {
    std::process::exit(contrastive_triad::cli::main_with_args(std::env::args_os()));
}
