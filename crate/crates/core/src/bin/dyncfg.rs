fn main() {
    std::process::exit(dyncfg::cli::run(std::env::args_os()));
}
