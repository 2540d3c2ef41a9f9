fn main() {
    std::process::exit(dissent_cli::run(std::env::args_os()));
}
