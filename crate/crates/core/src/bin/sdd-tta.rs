fn main() {
    std::process::exit(sdd_tta::cli::run(std::env::args_os()));
}
