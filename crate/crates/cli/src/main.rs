fn main() {
    std::process::exit(ffgo_cli::run(std::env::args_os()));
}
