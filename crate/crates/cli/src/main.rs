fn main() {
    std::process::exit(pgnd_cli::run(std::env::args_os()));
}
