fn main() {
    std::process::exit(swpower_cli::run(std::env::args_os()));
}
