fn main() {
    std::process::exit(dacl::cli::run(std::env::args_os()));
}
