fn main() {
    std::process::exit(tegu_cli::run(std::env::args_os()));
}
