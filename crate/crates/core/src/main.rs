fn main() {
    std::process::exit(hierformer::cli::run(std::env::args_os()));
}
