fn main() {
    std::process::exit(mtdgrid::harness::cli::run(std::env::args_os()));
}
