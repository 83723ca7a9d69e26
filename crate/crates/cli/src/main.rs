fn main() {
    std::process::exit(modeldiff_cli::run(std::env::args_os()));
}
