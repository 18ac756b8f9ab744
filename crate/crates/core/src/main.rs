fn main() {
    std::process::exit(mlcrnn::pipeline::cli::run(std::env::args_os()));
}
