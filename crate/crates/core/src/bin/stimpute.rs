fn main() {
    std::process::exit(stimpute::cli::run(std::env::args_os()));
}
