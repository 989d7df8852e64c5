fn main() {
    std::process::exit(synfaith::cli::run(std::env::args_os()));
}
