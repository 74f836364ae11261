fn main() {
    std::process::exit(mupdepth::cli::run(std::env::args_os()));
}
