fn main() {
    std::process::exit(weave_cli::run(std::env::args_os()));
}
