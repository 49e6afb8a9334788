fn main() {
    std::process::exit(deformer::cli::run(std::env::args_os()));
}
