fn main() {
    std::process::exit(rda_cli::run(std::env::args_os()));
}
