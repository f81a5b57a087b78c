fn main() {
    std::process::exit(celdecomp::cli::run(std::env::args_os()));
}
