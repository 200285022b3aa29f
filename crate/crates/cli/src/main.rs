fn main() {
    std::process::exit(facelora_cli::run(std::env::args_os()));
}
