fn main() {
    std::process::exit(lgnn::cli::run(std::env::args_os()));
}
