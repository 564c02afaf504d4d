fn main() {
    std::process::exit(mtenc::cli::run(std::env::args_os()));
}
