fn main() {
    std::process::exit(shiftseg::cli::run(std::env::args_os()));
}
