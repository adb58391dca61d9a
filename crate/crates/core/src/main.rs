fn main() {
    std::process::exit(multicomp::cli::run(std::env::args_os()));
}
