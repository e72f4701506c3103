fn main() {
    std::process::exit(slowbond::cli::run(std::env::args_os()));
}
