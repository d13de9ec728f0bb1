fn main() {
    std::process::exit(instrexp::cli::run(std::env::args_os()));
}
