fn main() {
    std::process::exit(cascade_pseudo::cli::run(std::env::args_os()));
}
